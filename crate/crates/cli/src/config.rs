//! Sectioned key=value run configuration.
//!
//! Resolution order is fixed: built-in default, then the config file, then
//! the command-line flag. Unknown sections or keys are rejected outright, and
//! every command writes the fully-resolved values it actually ran with next
//! to its outputs.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use natdoc_core::data::SynthConfig;
use natdoc_core::model::{ModelConfig, Variant};
use natdoc_core::train::TrainConfig;
use natdoc_core::{Error, Result};

/// Every accepted (section, key) pair with its documentation line.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("data", "vocab_size", "source word types in the synthetic lexicon"),
    ("data", "k_sentences", "sentences per generated document"),
    ("data", "len_lo", "minimum sentence length in tokens"),
    ("data", "len_hi", "maximum sentence length in tokens"),
    ("data", "ambiguity", "fraction of word types with mode-dependent translations (0 to 1)"),
    ("data", "n_train", "training documents"),
    ("data", "n_dev", "development documents"),
    ("data", "n_test", "test documents"),
    ("data", "seed", "corpus generator seed"),
    ("model", "variant", "at_teacher | nat_vanilla | glat | glat_ctc | dag | gtrans_glat | gtrans_glat_ctc | gtrans_dag"),
    ("model", "layers", "encoder and decoder layers"),
    ("model", "heads", "attention heads"),
    ("model", "d_model", "residual width"),
    ("model", "d_ff", "feed-forward width"),
    ("model", "global_layers", "top layers with unrestricted attention in sentence-framed variants"),
    ("model", "max_sentence_len", "length-head ceiling per sentence"),
    ("model", "max_segment_len", "segment packing budget in source tokens"),
    ("model", "ctc_upsample", "slots per source token for alignment variants"),
    ("model", "dag_lambda", "vertices per source token for graph variants"),
    ("model", "seed", "parameter initialization seed"),
    ("train", "lr", "peak learning rate"),
    ("train", "warmup", "linear warmup steps before inverse-sqrt decay"),
    ("train", "steps", "optimizer steps"),
    ("train", "batch_tokens", "source-token budget per batch"),
    ("train", "seed", "shuffling and glancing seed"),
    ("train", "w_len", "weight of the length-prediction loss term"),
    ("train", "glance_hi", "glancing reveal ratio at step 0"),
    ("train", "glance_lo", "glancing reveal ratio at the final step"),
    ("train", "clip", "global gradient-norm ceiling"),
    ("train", "eval_every", "dev evaluation period in steps (0: final step only)"),
    ("train", "beta1", "first-moment decay"),
    ("train", "beta2", "second-moment decay"),
    ("train", "adam_eps", "optimizer denominator floor"),
];

/// Rendered key documentation for --help.
pub fn schema_help() -> String {
    let mut s = String::from("Config file: flat key=value lines under [data], [model], [train] sections.\n");
    s.push_str("Flags override file values; defaults fill the rest. All keys:\n");
    let mut section = "";
    for (sec, key, doc) in SCHEMA {
        if *sec != section {
            section = sec;
            s.push_str(&format!("\n  [{sec}]\n"));
        }
        s.push_str(&format!("    {key:<17} {doc}\n"));
    }
    s
}

/// Parsed config file, schema-checked but untyped.
pub struct ConfigFile {
    values: BTreeMap<(String, String), String>,
}

impl ConfigFile {
    pub fn empty() -> ConfigFile {
        ConfigFile { values: BTreeMap::new() }
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(Some(path.display().to_string()), e.to_string()))?;
        let mut values = BTreeMap::new();
        let mut section: Option<String> = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{}:{}", path.display(), ln + 1);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !SCHEMA.iter().any(|(s, _, _)| *s == name) {
                    return Err(Error::Config(format!("{at}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("{at}: expected key = value, got '{line}'")));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(sec) = &section else {
                return Err(Error::Config(format!("{at}: '{key}' appears before any [section]")));
            };
            if !SCHEMA.iter().any(|(s, k, _)| s == sec && *k == key) {
                return Err(Error::Config(format!("{at}: unknown key '{key}' in [{sec}]")));
            }
            if values.insert((sec.clone(), key.to_string()), value.to_string()).is_some() {
                return Err(Error::Config(format!("{at}: duplicate key '{key}' in [{sec}]")));
            }
        }
        Ok(ConfigFile { values })
    }

    fn get(&self, sec: &str, key: &str) -> Option<&str> {
        self.values.get(&(sec.to_string(), key.to_string())).map(|s| s.as_str())
    }
}

/// The values a run actually used, in schema order, ready to write next to
/// the outputs.
#[derive(Default)]
pub struct Resolved {
    entries: Vec<(String, String, String)>,
}

impl Resolved {
    pub fn set(&mut self, sec: &str, key: &str, value: impl Display) {
        self.entries.retain(|(s, k, _)| !(s == sec && k == key));
        self.entries.push((sec.to_string(), key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (sec, key, value) in &self.entries {
            if sec != section {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}

/// default <- file <- flag, recording the winner.
fn pick<T: FromStr + Display>(
    file: &ConfigFile,
    out: &mut Resolved,
    sec: &str,
    key: &str,
    default: T,
    flag: Option<T>,
) -> Result<T> {
    let value = if let Some(v) = flag {
        v
    } else if let Some(raw) = file.get(sec, key) {
        raw.parse::<T>()
            .map_err(|_| Error::Config(format!("bad value '{raw}' for {sec}.{key}")))?
    } else {
        default
    };
    out.set(sec, key, &value);
    Ok(value)
}

#[derive(Default)]
pub struct DataFlags {
    pub vocab_size: Option<usize>,
    pub k_sentences: Option<usize>,
    pub ambiguity: Option<f64>,
    pub n_train: Option<usize>,
    pub n_dev: Option<usize>,
    pub n_test: Option<usize>,
    pub seed: Option<u64>,
}

pub fn resolve_synth(file: &ConfigFile, f: &DataFlags, out: &mut Resolved) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        vocab_size: pick(file, out, "data", "vocab_size", d.vocab_size, f.vocab_size)?,
        k_sentences: pick(file, out, "data", "k_sentences", d.k_sentences, f.k_sentences)?,
        len_lo: pick(file, out, "data", "len_lo", d.len_lo, None)?,
        len_hi: pick(file, out, "data", "len_hi", d.len_hi, None)?,
        ambiguity: pick(file, out, "data", "ambiguity", d.ambiguity, f.ambiguity)?,
        n_train: pick(file, out, "data", "n_train", d.n_train, f.n_train)?,
        n_dev: pick(file, out, "data", "n_dev", d.n_dev, f.n_dev)?,
        n_test: pick(file, out, "data", "n_test", d.n_test, f.n_test)?,
        seed: pick(file, out, "data", "seed", d.seed, f.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Default)]
pub struct ModelFlags {
    pub variant: Option<String>,
    pub seed: Option<u64>,
}

pub fn resolve_model(
    file: &ConfigFile,
    vocab_size: usize,
    f: &ModelFlags,
    out: &mut Resolved,
) -> Result<ModelConfig> {
    let name = match (&f.variant, file.get("model", "variant")) {
        (Some(v), _) => v.clone(),
        (None, Some(v)) => v.to_string(),
        (None, None) => {
            return Err(Error::Config(
                "no model variant: pass --variant or set model.variant".to_string(),
            ))
        }
    };
    let variant = Variant::parse(&name)?;
    out.set("model", "variant", variant.as_str());
    let d = ModelConfig::desk(variant, vocab_size);
    let cfg = ModelConfig {
        variant,
        layers: pick(file, out, "model", "layers", d.layers, None)?,
        heads: pick(file, out, "model", "heads", d.heads, None)?,
        d_model: pick(file, out, "model", "d_model", d.d_model, None)?,
        d_ff: pick(file, out, "model", "d_ff", d.d_ff, None)?,
        global_layers: pick(file, out, "model", "global_layers", d.global_layers, None)?,
        vocab_size,
        max_sentence_len: pick(file, out, "model", "max_sentence_len", d.max_sentence_len, None)?,
        max_segment_len: pick(file, out, "model", "max_segment_len", d.max_segment_len, None)?,
        ctc_upsample: pick(file, out, "model", "ctc_upsample", d.ctc_upsample, None)?,
        dag_lambda: pick(file, out, "model", "dag_lambda", d.dag_lambda, None)?,
        seed: pick(file, out, "model", "seed", d.seed, f.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Default)]
pub struct TrainFlags {
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub batch_tokens: Option<usize>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
}

pub fn resolve_train(file: &ConfigFile, f: &TrainFlags, out: &mut Resolved) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr: pick(file, out, "train", "lr", d.lr, f.lr)?,
        warmup: pick(file, out, "train", "warmup", d.warmup, None)?,
        steps: pick(file, out, "train", "steps", d.steps, f.steps)?,
        batch_tokens: pick(file, out, "train", "batch_tokens", d.batch_tokens, f.batch_tokens)?,
        seed: pick(file, out, "train", "seed", d.seed, f.seed)?,
        w_len: pick(file, out, "train", "w_len", d.w_len, None)?,
        glance_hi: pick(file, out, "train", "glance_hi", d.glance_hi, None)?,
        glance_lo: pick(file, out, "train", "glance_lo", d.glance_lo, None)?,
        clip: pick(file, out, "train", "clip", d.clip, None)?,
        eval_every: pick(file, out, "train", "eval_every", d.eval_every, f.eval_every)?,
        beta1: pick(file, out, "train", "beta1", d.beta1, None)?,
        beta2: pick(file, out, "train", "beta2", d.beta2, None)?,
        adam_eps: pick(file, out, "train", "adam_eps", d.adam_eps, None)?,
    };
    if cfg.lr <= 0.0 || cfg.steps == 0 || cfg.batch_tokens == 0 {
        return Err(Error::Config("lr, steps, and batch_tokens must be positive".to_string()));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn file_then_flag_precedence() {
        let f = write_tmp("[train]\nlr = 0.001\nsteps = 50\n");
        let cfg = ConfigFile::load(f.path()).unwrap();
        let mut out = Resolved::default();
        let t = resolve_train(
            &cfg,
            &TrainFlags { steps: Some(7), ..TrainFlags::default() },
            &mut out,
        )
        .unwrap();
        assert_eq!(t.steps, 7, "flag beats file");
        assert!((t.lr - 0.001).abs() < 1e-12, "file beats default");
        assert_eq!(t.warmup, TrainConfig::default().warmup, "default fills the rest");
        let rendered = out.render();
        assert!(rendered.contains("steps = 7"));
        assert!(rendered.contains("lr = 0.001"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = write_tmp("[train]\nlearning_rate = 0.001\n");
        assert!(matches!(ConfigFile::load(f.path()), Err(Error::Config(_))));
        let f = write_tmp("[optimizer]\nlr = 0.001\n");
        assert!(matches!(ConfigFile::load(f.path()), Err(Error::Config(_))));
        let f = write_tmp("lr = 0.001\n");
        assert!(matches!(ConfigFile::load(f.path()), Err(Error::Config(_))));
        let f = write_tmp("[train]\nlr = 0.1\nlr = 0.2\n");
        assert!(matches!(ConfigFile::load(f.path()), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let f = write_tmp("# top\n\n[data]\nseed = 3  # trailing\n");
        let cfg = ConfigFile::load(f.path()).unwrap();
        let mut out = Resolved::default();
        let s = resolve_synth(&cfg, &DataFlags::default(), &mut out).unwrap();
        assert_eq!(s.seed, 3);
    }

    #[test]
    fn variant_is_required_somewhere() {
        let cfg = ConfigFile::empty();
        let mut out = Resolved::default();
        let err = resolve_model(&cfg, 40, &ModelFlags::default(), &mut out).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let ok = resolve_model(
            &cfg,
            40,
            &ModelFlags { variant: Some("glat".into()), ..ModelFlags::default() },
            &mut out,
        )
        .unwrap();
        assert_eq!(ok.variant.as_str(), "glat");
        assert_eq!(ok.vocab_size, 40);
    }

    #[test]
    fn schema_help_lists_every_key() {
        let help = schema_help();
        for (_, key, _) in SCHEMA {
            assert!(help.contains(key), "{key} missing from help");
        }
    }
}
