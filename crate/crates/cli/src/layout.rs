//! On-disk layout of a data directory.
//!
//! ```text
//! suite.txt                    suite parameters, key=value
//! head_000/spec.txt            generator parameters of the head, key=value
//! head_000/train/prompt_000/   prompt directories
//! head_000/eval/prompt_000/
//! head_000/partition/          centroids.tns
//! head_000/partition_roped/
//! head_000/qmodel/             named tensors plus manifest.txt
//! head_000/index/prompt_000/   ivf_off.u64, ivf_idx.u64
//! ```
//!
//! Externally dumped activations use the same layout; `spec.txt` is then
//! only needed by the diagnostics that draw shifted queries.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use saap_core::harness::{HeadArtifacts, HeadData, SuiteConfig};
use saap_core::qmodel::QModel;
use saap_core::synth::{HeadSpec, SyntheticPrompt};
use saap_core::Partition;

use crate::CliError;

pub fn head_dir(root: &Path, h: usize) -> PathBuf {
    root.join(format!("head_{h:03}"))
}

pub fn prompt_dir(head: &Path, split: &str, p: usize) -> PathBuf {
    head.join(split).join(format!("prompt_{p:03}"))
}

fn write_kv(path: &Path, entries: &[(&str, String)]) -> Result<(), CliError> {
    let mut s = String::new();
    for (k, v) in entries {
        writeln!(s, "{k}={v}").unwrap();
    }
    std::fs::write(path, s).map_err(|e| CliError::Core(e.into()))
}

pub fn write_suite(root: &Path, cfg: &SuiteConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(root).map_err(|e| CliError::Core(e.into()))?;
    write_kv(
        &root.join("suite.txt"),
        &[
            ("heads", cfg.n_heads.to_string()),
            ("train_prompts", cfg.train_prompts.to_string()),
            ("eval_prompts", cfg.eval_prompts.to_string()),
            ("n_keys", cfg.n_keys.to_string()),
            ("n_queries", cfg.n_queries.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
    )
}

pub fn write_head(root: &Path, h: usize, data: &HeadData) -> Result<(), CliError> {
    let dir = head_dir(root, h);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Core(e.into()))?;
    write_kv(&dir.join("spec.txt"), &data.spec.entries())?;
    for (p, prompt) in data.train.iter().enumerate() {
        prompt.save(prompt_dir(&dir, "train", p))?;
    }
    for (p, prompt) in data.eval.iter().enumerate() {
        prompt.save(prompt_dir(&dir, "eval", p))?;
    }
    Ok(())
}

fn count_prompts(dir: &Path) -> usize {
    (0..).take_while(|&p| dir.join(format!("prompt_{p:03}")).is_dir()).count()
}

pub fn head_count(root: &Path) -> Result<usize, CliError> {
    let n = (0..).take_while(|&h| head_dir(root, h).is_dir()).count();
    if n == 0 {
        return Err(CliError::Data(format!("no head_000 directory under {}; run gen-data first", root.display())));
    }
    Ok(n)
}

pub fn load_head_data(root: &Path, h: usize) -> Result<HeadData, CliError> {
    let dir = head_dir(root, h);
    let mut spec = HeadSpec::default();
    let spec_path = dir.join("spec.txt");
    if spec_path.exists() {
        let text = std::fs::read_to_string(&spec_path).map_err(|e| CliError::Core(e.into()))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Data(format!("{}: bad line {line:?}", spec_path.display())))?;
            spec.set(k.trim(), v.trim())?;
        }
    }
    let load = |split: &str| -> Result<Vec<SyntheticPrompt>, CliError> {
        let n = count_prompts(&dir.join(split));
        (0..n).map(|p| SyntheticPrompt::load(prompt_dir(&dir, split, p)).map_err(CliError::from)).collect()
    };
    let train = load("train")?;
    let eval = load("eval")?;
    if eval.is_empty() {
        return Err(CliError::Data(format!("{} has no evaluation prompts", dir.display())));
    }
    Ok(HeadData { spec, train, eval })
}

pub fn load_all_data(root: &Path) -> Result<Vec<HeadData>, CliError> {
    (0..head_count(root)?).map(|h| load_head_data(root, h)).collect()
}

/// Head data plus whichever trained artifacts exist; the deroped partition is
/// required.
pub fn load_artifacts(root: &Path) -> Result<Vec<HeadArtifacts>, CliError> {
    (0..head_count(root)?)
        .map(|h| {
            let dir = head_dir(root, h);
            let data = load_head_data(root, h)?;
            let pdir = dir.join("partition");
            if !pdir.is_dir() {
                return Err(CliError::Data(format!("{} is missing; run train-kmeans first", pdir.display())));
            }
            let partition = Partition::load(&pdir)?;
            let rdir = dir.join("partition_roped");
            let partition_roped = if rdir.is_dir() { Some(Partition::load(&rdir)?) } else { None };
            let qdir = dir.join("qmodel");
            let qmodel = if qdir.is_dir() { Some(QModel::load(&qdir)?) } else { None };
            Ok(HeadArtifacts { data, partition, partition_roped, qmodel })
        })
        .collect()
}
