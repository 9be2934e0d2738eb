use std::fs;
use std::path::Path;

use serde_json::json;
use tsfm_core::backbones::{build_encoder, Checkpoint, EncoderConfig};
use tsfm_core::baselines::{one_nn_correct, DistanceSpec, Metric};
use tsfm_core::dataset::{load_archive, make_splits, preprocess, Archive, PretrainCorpus, SplitManifest, Task, TimeSeries};
use tsfm_core::finetune_eval::{
    evaluate, export_convergence, finetune as run_finetune, select_model, write_results, Accuracy, InitStrategy, RunResult,
};
use tsfm_core::pretrain::{pretrain as run_pretrain, write_log};
use tsfm_core::synth::{generate, write_archive, SynthConfig};
use tsfm_core::{Error, Result, RunConfig};

use crate::{BaselineArgs, DataArgs, FinetuneArgs, PretrainArgs, SplitArgs, SynthArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.tsfm";

/// 2 for usage and configuration problems, 3 for data, 4 for numeric failures.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

pub(crate) fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        context: format!("creating {}", dir.display()),
        source: e,
    })
}

struct Inputs {
    config: RunConfig,
    archive: Archive,
    manifest: SplitManifest,
}

fn load_inputs(data: &DataArgs) -> Result<Inputs> {
    let mut config = match &data.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = data.seed {
        config.seed = seed;
    }
    let raw = load_archive(&data.archive)?;
    let manifest = SplitManifest::read(&data.manifest)?;
    manifest.validate(&raw)?;
    let archive = if config.dataset.preprocess { preprocess(&raw)? } else { raw };
    Ok(Inputs {
        config,
        archive,
        manifest,
    })
}

fn provenance(command: &str, inputs: &Inputs) -> serde_json::Value {
    json!({
        "command": command,
        "config": inputs.config.to_json(),
        "config_hash": inputs.config.hash(),
        "manifest_hash": inputs.manifest.content_hash(),
    })
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        series_per_domain: a.series,
        length: a.length,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let archive = generate(&cfg)?;
    write_archive(&a.out, &archive)?;
    println!("wrote {} datasets to {}", archive.len(), a.out.display());
    Ok(())
}

pub fn split(a: &SplitArgs) -> Result<()> {
    let archive = load_archive(&a.archive)?;
    let manifest = make_splits(&archive, a.seed)?;
    create_dir(&a.out)?;
    let path = a.out.join("manifest.json");
    manifest.write(&path)?;
    for (id, s) in &manifest.datasets {
        println!(
            "{id}: pretrain {} train {} val {} test {}",
            s.pretrain.len(),
            s.train.len(),
            s.val.len(),
            s.test.len()
        );
    }
    println!("manifest {} hash {}", path.display(), manifest.content_hash());
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let mut inputs = load_inputs(&a.data)?;
    if let Some(e) = a.epochs {
        inputs.config.pretrain.epochs = e;
    }
    if a.steps_per_epoch.is_some() {
        inputs.config.pretrain.steps_per_epoch = a.steps_per_epoch;
    }
    let cfg = inputs.config.pretrain_config(a.method, a.backbone)?;
    let corpus = PretrainCorpus::from_manifest(&inputs.archive, &inputs.manifest)?;
    let resume = match &a.resume {
        Some(p) => Some(Checkpoint::read(p)?.0),
        None => None,
    };
    let out = run_pretrain(&cfg, &corpus, resume)?;
    create_dir(&a.out)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let hash = out.checkpoint.write(&ckpt_path)?;
    write_log(&a.out.join("pretrain_log.csv"), &out.log)?;
    let mut prov = provenance("pretrain", &inputs);
    prov["method"] = json!(a.method.name());
    prov["backbone"] = json!(a.backbone.name());
    prov["corpus_hash"] = json!(corpus.content_hash());
    prov["checkpoint_hash"] = json!(hash);
    prov["epochs_done"] = json!(out.checkpoint.state.epochs_done);
    write_json(&a.out.join("provenance.json"), &prov)?;
    if let Some(last) = out.log.last() {
        println!("final loss {:.6} after {} epochs", last.loss, out.checkpoint.state.epochs_done);
    }
    println!("checkpoint {} sha256 {hash}", ckpt_path.display());
    Ok(())
}

pub fn finetune(a: &FinetuneArgs) -> Result<()> {
    let mut inputs = load_inputs(&a.data)?;
    if let Some(e) = a.epochs {
        inputs.config.finetune.epochs = e;
    }
    let task = Task::from_manifest(&inputs.archive, &inputs.manifest, &a.task)?;
    let seed = inputs.config.seed;
    let (base, ckpt_hash, inits) = match (&a.checkpoint, a.backbone) {
        (Some(p), _) => {
            let (ckpt, hash) = Checkpoint::read(p)?;
            (ckpt.bundle, Some(hash), vec![InitStrategy::Pretrained, InitStrategy::Random])
        }
        (None, Some(arch)) => {
            let enc = EncoderConfig {
                arch,
                ..inputs.config.encoder.clone()
            };
            (build_encoder(&enc, seed)?, None, vec![InitStrategy::Random])
        }
        (None, None) => return Err(Error::InvalidArgument("--scratch needs --backbone".into())),
    };
    let pretrain_method = if ckpt_hash.is_some() { base.provenance.method.clone() } else { "none".into() };
    let method_id = format!("{}+{}", pretrain_method, base.config.arch.name());

    let mut runs = Vec::new();
    for init in inits {
        log::info!("fine-tuning {method_id} on {} from {init} weights", task.id);
        runs.push(run_finetune(&base, init, &task, &inputs.config.finetune, seed)?);
    }
    let logs: Vec<_> = runs.iter().map(|r| r.log.clone()).collect();
    let chosen = select_model(&logs)?;
    let run = runs.iter().find(|r| r.log.init == chosen.init).expect("selected from these runs");
    let acc = evaluate(&run.bundle, &task.test)?;

    create_dir(&a.out.join("logs"))?;
    let conv_dir = a.out.join("convergence");
    let mut smooth = serde_json::Map::new();
    for r in &runs {
        write_json(&a.out.join("logs").join(format!("{}.json", r.log.init)), &serde_json::to_value(&r.log)?)?;
        let stem = format!("{method_id}__{}__{}", task.id, r.log.init);
        smooth.insert(r.log.init.to_string(), json!(export_convergence(&r.log, &conv_dir, &stem)?));
    }
    let result = RunResult {
        task: task.id.clone(),
        method: method_id.clone(),
        accuracy_num: acc.correct,
        accuracy_den: acc.total,
        epoch: Some(chosen.epoch),
        init: Some(chosen.init),
    };
    write_results(&a.out.join("results.csv"), std::slice::from_ref(&result))?;

    let mut prov = provenance("finetune", &inputs);
    prov["task"] = json!(task.id);
    prov["method"] = json!(method_id);
    prov["checkpoint"] = json!(a.checkpoint.as_ref().map(|p| p.display().to_string()));
    prov["checkpoint_hash"] = json!(ckpt_hash);
    prov["encoder_provenance"] = json!({
        "method": base.provenance.method,
        "seed": base.provenance.seed,
        "corpus_hash": base.provenance.corpus_hash,
        "epochs": base.provenance.epochs,
    });
    prov["selection"] = json!({ "epoch": chosen.epoch, "init": chosen.init, "val_acc": chosen.val_acc });
    prov["test_accuracy"] = json!({ "correct": acc.correct, "total": acc.total, "value": acc.value() });
    prov["smoothness"] = serde_json::Value::Object(smooth);
    if let Some(random) = runs.iter().find(|r| r.log.init == InitStrategy::Random) {
        let only = select_model(std::slice::from_ref(&random.log))?;
        let racc = evaluate(&random.bundle, &task.test)?;
        prov["random_only"] = json!({
            "epoch": only.epoch,
            "val_acc": only.val_acc,
            "test_correct": racc.correct,
            "test_total": racc.total,
        });
    }
    write_json(&a.out.join("provenance.json"), &prov)?;
    println!(
        "{} {method_id}: test accuracy {acc} ({:.4}), chose {} weights at epoch {}",
        task.id,
        acc.value(),
        chosen.init,
        chosen.epoch
    );
    Ok(())
}

fn labeled(split: &[TimeSeries], task: &str) -> Result<Vec<(Vec<f64>, usize)>> {
    split
        .iter()
        .map(|s| {
            s.label
                .map(|l| (s.values.clone(), l))
                .ok_or_else(|| Error::InvalidArgument(format!("task {task} has an unlabeled sample {}", s.sample_id)))
        })
        .collect()
}

pub fn baseline(a: &BaselineArgs) -> Result<()> {
    let inputs = load_inputs(&a.data)?;
    let task = Task::from_manifest(&inputs.archive, &inputs.manifest, &a.task)?;
    let spec = match a.metric {
        Metric::Ed => {
            if a.window.is_some() {
                return Err(Error::InvalidArgument("--window applies to dtw only".into()));
            }
            DistanceSpec::euclidean()
        }
        Metric::Dtw => DistanceSpec::dtw(a.window),
    };
    let train = labeled(&task.train, &task.id)?;
    let test = labeled(&task.test, &task.id)?;
    if test.is_empty() {
        return Err(Error::InvalidArgument(format!("task {} has an empty test split", task.id)));
    }
    let acc = Accuracy {
        correct: one_nn_correct(&train, &test, &spec)?,
        total: test.len(),
    };
    let metric = match a.metric {
        Metric::Ed => "ed",
        Metric::Dtw => "dtw",
    };
    let result = RunResult {
        task: task.id.clone(),
        method: format!("none+{metric}"),
        accuracy_num: acc.correct,
        accuracy_den: acc.total,
        epoch: None,
        init: None,
    };
    create_dir(&a.out)?;
    write_results(&a.out.join("results.csv"), std::slice::from_ref(&result))?;
    let mut prov = provenance("baseline", &inputs);
    prov["task"] = json!(task.id);
    prov["metric"] = json!(metric);
    prov["window"] = json!(a.window);
    prov["test_accuracy"] = json!({ "correct": acc.correct, "total": acc.total, "value": acc.value() });
    write_json(&a.out.join("provenance.json"), &prov)?;
    println!("{} 1-NN {metric}: test accuracy {acc} ({:.4})", task.id, acc.value());
    Ok(())
}
