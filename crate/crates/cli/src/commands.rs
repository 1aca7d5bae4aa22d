use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use uranker::annotation::SessionStore;
use uranker::dataset::{load_dataset, load_images, load_pairs, split_dataset, synth_generate, SynthOptions};
use uranker::metrics::{mean_group_correlation, RankVector};
use uranker::ranking::{evaluate_ranker, train_uranker, TrainRecipe};
use uranker::runconfig::{apply_overrides, read_overrides, split_override, KeyValue};
use uranker::uie::{evaluate_uie, train_uie, Nu2Net, Nu2NetConfig, UieLossConfig, UieRecipe};
use uranker::uranker::{URanker, URankerConfig};
use uranker::{Error, ImageTensor};

use crate::error::CliResult;
use crate::server::{router, AppState};
use crate::sim::{simulate, SimSpec};
use crate::{Command, ConfigArgs};

/// Key choosing the ranker preset that other model keys then modify.
pub const RANKER_PRESET_KEY: &str = "model";
/// Same for the enhancement network.
pub const UIE_PRESET_KEY: &str = "uie_model";

pub fn dispatch(command: Command) -> CliResult<()> {
    let out = match command {
        Command::MakeSynth { groups, k, seed, out, size, no_pairs } => make_synth(groups, k, seed, &out, size, !no_pairs)?,
        Command::TrainRanker { data, out, config, train_groups, split_seed } => {
            train_ranker(&data, &out, &config, train_groups, split_seed)?
        }
        Command::EvalRanker { ckpt, data, report, split } => eval_ranker(&ckpt, &data, report.as_deref(), split.as_deref())?,
        Command::TrainUie { data, out, lambda, ranker, config } => train_uie_cmd(&data, &out, lambda, ranker.as_deref(), &config)?,
        Command::EvalUie { ckpt, data, report } => eval_uie(&ckpt, &data, report.as_deref())?,
        Command::Enhance { ckpt, input, out } => enhance(&ckpt, &input, &out)?,
        Command::Score { ckpt, input } => score(&ckpt, &input)?,
        Command::ScoreMetrics { pred, gt, report } => score_metrics(&pred, &gt, report.as_deref())?,
        Command::AnnotateServe { data, port, host, log } => return annotate_serve(data.as_deref(), &host, port, log.as_deref()),
        Command::AnnotateSim { voters, server } => annotate_sim(&voters, server.as_deref())?,
    };
    println!("{out}");
    Ok(())
}

fn device() -> Device {
    Device::Cpu
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(serde_json::from_str(&text)?)
}

/// Sibling of a checkpoint: `model.safetensors` -> `model.<suffix>`.
pub fn sibling(ckpt: &Path, suffix: &str) -> PathBuf {
    ckpt.with_extension(suffix)
}

/// Overrides from the config file and then `--set`. A run snapshot written
/// by this tool is accepted as a config file too.
fn collect_overrides(args: &ConfigArgs) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(map)) if map.contains_key("command") => {
                let cfg = map.get("config").and_then(Value::as_object).ok_or_else(|| {
                    Error::Config(format!("{}: snapshot without a config object", path.display()))
                })?;
                for (k, v) in cfg {
                    out.push((k.clone(), v.as_str().map_or_else(|| v.to_string(), str::to_string)));
                }
            }
            _ => out.extend(read_overrides(path)?),
        }
    }
    for item in &args.set {
        out.push(split_override(item)?);
    }
    Ok(out)
}

/// Removes every `key` entry and returns the last value.
fn take_key(overrides: &mut Vec<(String, String)>, key: &str) -> Option<String> {
    let last = overrides.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    overrides.retain(|(k, _)| k != key);
    last
}

fn ranker_preset(name: &str) -> CliResult<URankerConfig> {
    Ok(match name {
        "default" => URankerConfig::default(),
        "toy" => URankerConfig::toy(),
        "tiny" => URankerConfig::tiny(),
        _ => return Err(Error::Config(format!("{RANKER_PRESET_KEY}: unknown preset {name:?}; use default, toy or tiny")).into()),
    })
}

fn uie_preset(name: &str) -> CliResult<Nu2NetConfig> {
    Ok(match name {
        "default" => Nu2NetConfig::default(),
        "toy" => Nu2NetConfig::toy(),
        _ => return Err(Error::Config(format!("{UIE_PRESET_KEY}: unknown preset {name:?}; use default or toy")).into()),
    })
}

fn kv_object(preset: (&str, &str), parts: &[&dyn KeyValue]) -> serde_json::Map<String, Value> {
    let mut map = serde_json::Map::new();
    map.insert(preset.0.into(), preset.1.into());
    for p in parts {
        for (k, v) in p.to_kv() {
            map.insert(k, Value::String(v));
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

fn make_synth(groups: usize, k: usize, seed: u64, out: &Path, size: usize, pairs: bool) -> CliResult<Value> {
    let manifest = synth_generate(groups, k, seed, out, &SynthOptions { size, pairs })?;
    Ok(json!({
        "root": out,
        "groups": manifest.groups.len(),
        "pairs": manifest.pairs.len(),
        "k": k,
        "seed": seed,
        "size": size,
    }))
}

fn train_ranker(data: &Path, out: &Path, args: &ConfigArgs, train_groups: Option<usize>, split_seed: u64) -> CliResult<Value> {
    let mut overrides = collect_overrides(args)?;
    let preset = take_key(&mut overrides, RANKER_PRESET_KEY).unwrap_or_else(|| "default".into());
    let mut model_cfg = ranker_preset(&preset)?;
    let mut recipe = TrainRecipe::default();
    apply_overrides(&overrides, &mut [&mut recipe, &mut model_cfg])?;
    model_cfg.validate()?;
    recipe.validate()?;

    let manifest = load_dataset(data)?;
    if manifest.groups.is_empty() {
        return Err(Error::Dataset { path: data.into(), detail: "no ranked groups".into() }.into());
    }
    let (train, test) = match train_groups {
        Some(n) => split_dataset(&manifest.groups, n, split_seed)?,
        None => (manifest.groups.clone(), Vec::new()),
    };
    let snapshot = json!({
        "command": "train-ranker",
        "data": data,
        "out": out,
        "train_groups": train_groups,
        "split_seed": split_seed,
        "config": kv_object((RANKER_PRESET_KEY, &preset), &[&recipe, &model_cfg]),
    });
    write_json(&sibling(out, "run.json"), &snapshot)?;
    if train_groups.is_some() {
        let split = SplitFile {
            seed: split_seed,
            train: train.iter().map(|g| g.id.clone()).collect(),
            test: test.iter().map(|g| g.id.clone()).collect(),
        };
        write_json(&sibling(out, "split.json"), &split)?;
    }

    let images = load_images(&manifest.root, &train)?;
    let model = URanker::new(model_cfg, recipe.seed, DType::F32, &device())?;
    let log_path = sibling(out, "log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let report = train_uranker(&model, &images, &recipe, Some(&mut log))?;
    log.flush()?;
    model.save(out)?;
    Ok(json!({
        "checkpoint": out,
        "train_groups": report.train_groups,
        "holdout_groups": report.holdout_groups,
        "test_groups": test.len(),
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "epochs": report.epochs.len(),
        "holdout_srcc": report.epochs.last().and_then(|e| e.holdout_srcc),
    }))
}

fn eval_ranker(ckpt: &Path, data: &Path, report: Option<&Path>, split: Option<&Path>) -> CliResult<Value> {
    let model = URanker::load(ckpt, DType::F32, &device())?;
    let manifest = load_dataset(data)?;
    let groups = match split {
        Some(path) => {
            let split: SplitFile = read_json(path)?;
            let wanted: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();
            let picked: Vec<_> = manifest.groups.iter().filter(|g| wanted.contains(g.id.as_str())).cloned().collect();
            if picked.len() != wanted.len() {
                return Err(Error::Dataset { path: data.into(), detail: "split names groups the dataset lacks".into() }.into());
            }
            picked
        }
        None => manifest.groups.clone(),
    };
    let images = load_images(&manifest.root, &groups)?;
    let result = evaluate_ranker(&model, &images)?;
    if let Some(path) = report {
        write_json(path, &result)?;
    }
    Ok(json!({ "srcc": result.srcc, "krcc": result.krcc, "groups": result.groups }))
}

fn train_uie_cmd(data: &Path, out: &Path, lambda: Option<f64>, ranker: Option<&Path>, args: &ConfigArgs) -> CliResult<Value> {
    let mut overrides = collect_overrides(args)?;
    let preset = take_key(&mut overrides, UIE_PRESET_KEY).unwrap_or_else(|| "default".into());
    let mut net_cfg = uie_preset(&preset)?;
    let mut recipe = UieRecipe::default();
    let mut loss_cfg = UieLossConfig::default();
    apply_overrides(&overrides, &mut [&mut recipe, &mut loss_cfg, &mut net_cfg])?;
    if let Some(l) = lambda {
        loss_cfg.lambda = l;
    }
    net_cfg.validate()?;
    recipe.validate()?;
    loss_cfg.validate()?;
    if loss_cfg.lambda > 0.0 && ranker.is_none() {
        return Err(Error::Config("lambda > 0 needs --ranker".into()).into());
    }

    let manifest = load_dataset(data)?;
    if manifest.pairs.is_empty() {
        return Err(Error::Dataset { path: data.into(), detail: "no enhancement pairs".into() }.into());
    }
    let snapshot = json!({
        "command": "train-uie",
        "data": data,
        "out": out,
        "ranker": ranker,
        "config": kv_object((UIE_PRESET_KEY, &preset), &[&recipe, &loss_cfg, &net_cfg]),
    });
    write_json(&sibling(out, "run.json"), &snapshot)?;

    let ranker = ranker.map(|p| URanker::load(p, DType::F32, &device())).transpose()?;
    let pairs = load_pairs(&manifest)?;
    let net = Nu2Net::new(net_cfg, recipe.seed, DType::F32, &device())?;
    let mut log = BufWriter::new(File::create(sibling(out, "log.jsonl"))?);
    let report = train_uie(&net, &pairs, &recipe, &loss_cfg, ranker.as_ref(), Some(&mut log))?;
    log.flush()?;
    net.save(out)?;
    Ok(json!({
        "checkpoint": out,
        "pairs": pairs.len(),
        "initial_mae": report.initial_mae,
        "final_mae": report.final_mae,
        "epochs": report.epochs.len(),
    }))
}

fn eval_uie(ckpt: &Path, data: &Path, report: Option<&Path>) -> CliResult<Value> {
    let net = Nu2Net::load(ckpt, DType::F32, &device())?;
    let manifest = load_dataset(data)?;
    let pairs = load_pairs(&manifest)?;
    let result = evaluate_uie(&net, &pairs)?;
    if let Some(path) = report {
        write_json(path, &result)?;
    }
    Ok(json!({ "psnr": result.psnr, "ssim": result.ssim, "pairs": result.per_pair.len() }))
}

fn enhance(ckpt: &Path, input: &Path, out: &Path) -> CliResult<Value> {
    let net = Nu2Net::load(ckpt, DType::F32, &device())?;
    let img = ImageTensor::load_png(input)?;
    let enhanced = net.enhance(&img)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    enhanced.save_png(out)?;
    Ok(json!({ "out": out, "height": enhanced.height(), "width": enhanced.width() }))
}

fn score(ckpt: &Path, input: &Path) -> CliResult<Value> {
    let model = URanker::load(ckpt, DType::F32, &device())?;
    let img = ImageTensor::load_png(input)?;
    Ok(json!(model.score(&img)?))
}

fn score_metrics(pred: &Path, gt: &Path, report: Option<&Path>) -> CliResult<Value> {
    let pred: BTreeMap<String, Vec<f64>> = read_json(pred)?;
    let gt: BTreeMap<String, RankVector> = read_json(gt)?;
    if let Some(extra) = pred.keys().find(|k| !gt.contains_key(*k)) {
        return Err(Error::InvalidInput(format!("group {extra:?} has scores but no ranks")).into());
    }
    let mut rows = Vec::with_capacity(gt.len());
    for (id, ranks) in &gt {
        let scores = pred.get(id).ok_or_else(|| Error::InvalidInput(format!("group {id:?} has ranks but no scores")))?;
        rows.push((id.as_str(), scores.as_slice(), ranks));
    }
    let result = mean_group_correlation(rows)?;
    if let Some(path) = report {
        write_json(path, &result)?;
    }
    Ok(serde_json::to_value(&result)?)
}

fn annotate_serve(data: Option<&Path>, host: &str, port: u16, log: Option<&Path>) -> CliResult<()> {
    let manifest = data.map(load_dataset).transpose()?;
    let log = log.map(Path::to_path_buf).or_else(|| data.map(|d| d.join("annotation").join("events.jsonl")));
    let store = match &log {
        Some(p) => SessionStore::open(p)?,
        None => SessionStore::in_memory(),
    };
    let state = Arc::new(AppState { store, data: manifest });
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        let addr = listener.local_addr()?;
        println!("{}", json!({ "listening": format!("http://{addr}"), "log": log }));
        std::io::stdout().flush()?;
        axum::serve(listener, router(state)).await?;
        Ok::<_, crate::CliError>(())
    })
}

fn annotate_sim(voters: &Path, server: Option<&str>) -> CliResult<Value> {
    let spec: SimSpec = read_json(voters)?;
    let base = server
        .map(str::to_string)
        .or_else(|| spec.server.clone())
        .ok_or_else(|| Error::Config("no server URL; pass --server or set \"server\" in the spec".into()))?;
    let rt = tokio::runtime::Runtime::new()?;
    let report = rt.block_on(simulate(&base, &spec))?;
    if !report.matches_oracle {
        return Err(crate::CliError::Oracle(format!(
            "session {} ranked {:?}, oracle disagrees",
            report.session_id, report.ranking
        )));
    }
    Ok(serde_json::to_value(&report)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_key_is_taken_last_wins() {
        let mut o = vec![
            ("model".to_string(), "toy".to_string()),
            ("epochs".to_string(), "2".to_string()),
            ("model".to_string(), "tiny".to_string()),
        ];
        assert_eq!(take_key(&mut o, "model").as_deref(), Some("tiny"));
        assert_eq!(o, vec![("epochs".to_string(), "2".to_string())]);
        assert!(take_key(&mut o, "model").is_none());
    }

    #[test]
    fn snapshot_is_accepted_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut recipe = TrainRecipe::default();
        recipe.epochs = 3;
        let snap = json!({ "command": "train-ranker", "config": kv_object(("model", "toy"), &[&recipe]) });
        write_json(&path, &snap).unwrap();
        let args = ConfigArgs { config: Some(path), set: vec!["lr=0.5".into()] };
        let mut o = collect_overrides(&args).unwrap();
        assert_eq!(take_key(&mut o, "model").as_deref(), Some("toy"));
        let mut back = TrainRecipe::default();
        apply_overrides(&o, &mut [&mut back]).unwrap();
        assert_eq!(back.epochs, 3);
        assert_eq!(back.lr, 0.5);
    }

    #[test]
    fn unknown_presets_rejected() {
        assert!(ranker_preset("huge").is_err());
        assert!(uie_preset("tiny").is_err());
    }
}
