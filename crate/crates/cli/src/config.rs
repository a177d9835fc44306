//! Run configuration: TOML file, `CURE_*` environment variables and flags,
//! resolved in that order of increasing precedence.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use cure_core::datasets::{DatasetSpec, SourceFormat, DEFAULT_SAMPLE_N, DEFAULT_SEED};
use cure_core::domain::{Dataset, Decoding, EndpointConfig, Mode, Role};
use cure_core::engine::{PipelineConfig, StageTokens, DEFAULT_MAX_JSON_RETRIES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use url::Url;

pub const DEFAULT_CONCURRENCY: usize = cure_core::client::DEFAULT_CONCURRENCY;
pub const DEFAULT_MAX_RETRIES: u32 = cure_core::client::DEFAULT_MAX_RETRIES;
pub const DEFAULT_OUT: &str = "runs/latest";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEndpoint {
    pub model_id: String,
    pub base_url: Url,
    /// Name of the environment variable that holds the API key.
    pub api_key_env: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilePipeline {
    pub primary: Option<FileEndpoint>,
    pub helper1: Option<FileEndpoint>,
    pub helper2: Option<FileEndpoint>,
    pub max_json_retries: Option<u32>,
    pub stage_tokens: Option<StageTokens>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDataset {
    pub kind: Option<String>,
    pub path: Option<PathBuf>,
    pub format: Option<String>,
    pub split: Option<String>,
    pub sample_n: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRun {
    pub mode: Option<String>,
    pub concurrency: Option<usize>,
    pub max_retries: Option<u32>,
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub mock: Option<PathBuf>,
}

/// The config file as written; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub pipeline: FilePipeline,
    #[serde(default)]
    pub dataset: FileDataset,
    #[serde(default)]
    pub run: FileRun,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        if let Some(path) = find_secret_key(&toml::Value::Table(raw.clone()), "") {
            bail!("`{path}` looks like a credential; config files name an environment variable via `api_key_env` instead");
        }
        toml::Value::Table(raw)
            .try_into()
            .context("config does not match the expected layout")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }
}

fn find_secret_key(v: &toml::Value, prefix: &str) -> Option<String> {
    let toml::Value::Table(t) = v else {
        return None;
    };
    for (k, v) in t {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if matches!(k.as_str(), "api_key" | "apikey" | "token" | "secret") {
            return Some(path);
        }
        if let Some(found) = find_secret_key(v, &path) {
            return Some(found);
        }
    }
    None
}

/// Values given on the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub dataset: Option<String>,
    pub data: Option<PathBuf>,
    pub format: Option<String>,
    pub sample_n: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub mock: Option<PathBuf>,
    pub concurrency: Option<usize>,
    pub max_retries: Option<u32>,
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub dataset: DatasetSpec,
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub mock_script: Option<PathBuf>,
    pub concurrency: usize,
    pub max_retries: u32,
}

#[derive(Serialize)]
struct Experiment<'a> {
    pipeline: &'a PipelineConfig,
    dataset: &'a DatasetSpec,
    mode: Mode,
    mock_script: Option<&'a Path>,
    max_retries: u32,
}

impl RunConfig {
    /// Digest over the settings that determine results. Output location,
    /// cache location and concurrency are excluded.
    pub fn digest(&self) -> String {
        let e = Experiment {
            pipeline: &self.pipeline,
            dataset: &self.dataset,
            mode: self.mode,
            mock_script: self.mock_script.as_deref(),
            max_retries: self.max_retries,
        };
        hex::encode(Sha256::digest(
            serde_json::to_vec(&e).expect("config serializes"),
        ))
    }
}

pub type Env<'a> = &'a dyn Fn(&str) -> Option<String>;

pub fn process_env(key: &str) -> Option<String> {
    std::env::var(key).ok().filter(|v| !v.is_empty())
}

fn layer<T: FromStr>(flag: Option<T>, env: Env, key: &str, file: Option<T>) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if flag.is_some() {
        return Ok(flag);
    }
    if let Some(raw) = env(key) {
        let v = raw
            .parse()
            .map_err(|e| anyhow!("environment variable {key}={raw:?}: {e}"))?;
        return Ok(Some(v));
    }
    Ok(file)
}

fn parse_dataset(s: &str) -> Result<Dataset> {
    Dataset::from_name(s)
        .ok_or_else(|| anyhow!("unknown dataset `{s}` (expected MedQA, MedMCQA or PubMedQA)"))
}

pub fn parse_mode(s: &str) -> Result<Mode> {
    Mode::from_slug(s)
        .ok_or_else(|| anyhow!("unknown mode `{s}` (expected zero-shot, single-cot or full)"))
}

fn parse_format(s: &str) -> Result<SourceFormat> {
    match s.trim().to_ascii_lowercase().as_str() {
        "published" => Ok(SourceFormat::Published),
        "normalized" => Ok(SourceFormat::Normalized),
        _ => bail!("unknown dataset format `{s}` (expected published or normalized)"),
    }
}

fn endpoint(role: Role, file: Option<&FileEndpoint>, mock: bool) -> Result<EndpointConfig> {
    let Some(f) = file else {
        if mock {
            let url = Url::parse("http://mock.invalid/v1").expect("static url");
            return Ok(EndpointConfig::new(role, format!("mock-{role}"), url));
        }
        bail!("[pipeline.{role}] is required unless a mock script is given");
    };
    let d = Decoding::default();
    let mut ep = EndpointConfig::new(role, f.model_id.clone(), f.base_url.clone());
    ep.api_key_ref = f.api_key_env.clone();
    ep.decoding = Decoding {
        temperature: f.temperature.unwrap_or(d.temperature),
        max_tokens: f.max_tokens.unwrap_or(d.max_tokens),
        timeout: f.timeout_ms.map(Duration::from_millis).unwrap_or(d.timeout),
    };
    Ok(ep)
}

/// Merges the three layers. Each overridable setting is taken from the
/// flag if given, else `CURE_<NAME>`, else the file, else the default.
pub fn resolve(file: &FileConfig, env: Env, flags: &Overrides) -> Result<RunConfig> {
    let string = |flag: &Option<String>, key, f: &Option<String>| {
        layer::<String>(flag.clone(), env, key, f.clone())
    };

    let kind = string(&flags.dataset, "CURE_DATASET", &file.dataset.kind)?
        .ok_or_else(|| anyhow!("no dataset given (--dataset, CURE_DATASET or [dataset] kind)"))?;
    let kind = parse_dataset(&kind)?;
    let path = layer(
        flags.data.clone(),
        env,
        "CURE_DATA",
        file.dataset.path.clone(),
    )?
    .ok_or_else(|| anyhow!("no dataset file given (--data, CURE_DATA or [dataset] path)"))?;
    let format = string(&flags.format, "CURE_FORMAT", &file.dataset.format)?
        .map(|f| parse_format(&f))
        .transpose()?
        .unwrap_or_default();
    let mut dataset = DatasetSpec::new(kind, path);
    dataset.format = format;
    dataset.sample_n = layer(flags.sample_n, env, "CURE_SAMPLE_N", file.dataset.sample_n)?
        .unwrap_or(DEFAULT_SAMPLE_N);
    dataset.seed = layer(flags.seed, env, "CURE_SEED", file.dataset.seed)?.unwrap_or(DEFAULT_SEED);
    if let Some(split) = &file.dataset.split {
        dataset.split = split.clone();
    }

    let mode = string(&flags.mode, "CURE_MODE", &file.run.mode)?
        .map(|m| parse_mode(&m))
        .transpose()?
        .unwrap_or(Mode::FullFramework);
    let mock_script = layer(flags.mock.clone(), env, "CURE_MOCK", file.run.mock.clone())?;
    let concurrency = layer(
        flags.concurrency,
        env,
        "CURE_CONCURRENCY",
        file.run.concurrency,
    )?
    .unwrap_or(DEFAULT_CONCURRENCY);
    if concurrency == 0 {
        bail!("concurrency must be at least 1");
    }
    let max_retries = layer(
        flags.max_retries,
        env,
        "CURE_MAX_RETRIES",
        file.run.max_retries,
    )?
    .unwrap_or(DEFAULT_MAX_RETRIES);
    let out_dir = layer(flags.out.clone(), env, "CURE_OUT", file.run.out.clone())?
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let cache_dir = layer(
        flags.cache.clone(),
        env,
        "CURE_CACHE",
        file.run.cache.clone(),
    )?;

    let mock = mock_script.is_some();
    let p = &file.pipeline;
    let mut pipeline = PipelineConfig::new(
        endpoint(Role::Primary, p.primary.as_ref(), mock)?,
        endpoint(Role::Helper1, p.helper1.as_ref(), mock)?,
        endpoint(Role::Helper2, p.helper2.as_ref(), mock)?,
    )?;
    pipeline.max_json_retries = p.max_json_retries.unwrap_or(DEFAULT_MAX_JSON_RETRIES);
    if let Some(st) = &p.stage_tokens {
        pipeline.stage_tokens = st.clone();
    }

    Ok(RunConfig {
        pipeline,
        dataset,
        mode,
        out_dir,
        cache_dir,
        mock_script,
        concurrency,
        max_retries,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    fn env_of(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let m: HashMap<String, String> = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        move |k| m.get(k).cloned()
    }

    const FILE: &str = r#"
        [dataset]
        kind = "MedQA"
        path = "file.jsonl"
        seed = 1

        [run]
        mode = "zero-shot"
        concurrency = 2
        mock = "file-script.json"
        out = "file-out"
    "#;

    #[test]
    fn defaults_apply_when_nothing_is_set() {
        let file = FileConfig::parse("[dataset]\nkind='pubmedqa'\npath='x'\n[run]\nmock='m.json'")
            .unwrap();
        let c = resolve(&file, &env_of(&[]), &Overrides::default()).unwrap();
        assert_eq!(c.dataset.seed, DEFAULT_SEED);
        assert_eq!(c.dataset.sample_n, DEFAULT_SAMPLE_N);
        assert_eq!(c.mode, Mode::FullFramework);
        assert_eq!(c.concurrency, DEFAULT_CONCURRENCY);
        assert_eq!(c.out_dir, PathBuf::from(DEFAULT_OUT));
        assert_eq!(c.cache_dir, None);
        assert_eq!(c.pipeline.primary.model_id, "mock-primary");
    }

    /// Every combination of {file, env, flag} presence for each setting:
    /// the highest layer present wins.
    #[test]
    fn precedence_matrix() {
        let file_cfg = FileConfig::parse(FILE).unwrap();
        let empty =
            FileConfig::parse("[dataset]\nkind='MedQA'\npath='file.jsonl'\n[run]\nmock='m'")
                .unwrap();
        for mask in 0..8u8 {
            let (use_file, use_env, use_flag) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
            let file = if use_file { &file_cfg } else { &empty };
            let env_pairs: &[(&str, &str)] = if use_env {
                &[
                    ("CURE_SEED", "2"),
                    ("CURE_MODE", "single-cot"),
                    ("CURE_CONCURRENCY", "3"),
                    ("CURE_OUT", "env-out"),
                ]
            } else {
                &[]
            };
            let flags = if use_flag {
                Overrides {
                    seed: Some(3),
                    mode: Some("full".into()),
                    concurrency: Some(4),
                    out: Some("flag-out".into()),
                    ..Overrides::default()
                }
            } else {
                Overrides::default()
            };
            let c = resolve(file, &env_of(env_pairs), &flags).unwrap();
            let (seed, mode, conc, out) = if use_flag {
                (3, Mode::FullFramework, 4, "flag-out")
            } else if use_env {
                (2, Mode::SingleModelCoT, 3, "env-out")
            } else if use_file {
                (1, Mode::ZeroShotOnly, 2, "file-out")
            } else {
                (
                    DEFAULT_SEED,
                    Mode::FullFramework,
                    DEFAULT_CONCURRENCY,
                    DEFAULT_OUT,
                )
            };
            assert_eq!(c.dataset.seed, seed, "mask {mask}");
            assert_eq!(c.mode, mode, "mask {mask}");
            assert_eq!(c.concurrency, conc, "mask {mask}");
            assert_eq!(c.out_dir, PathBuf::from(out), "mask {mask}");
        }
    }

    #[test]
    fn bad_env_value_is_a_config_error() {
        let file = FileConfig::parse(FILE).unwrap();
        let err = resolve(
            &file,
            &env_of(&[("CURE_SEED", "abc")]),
            &Overrides::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("CURE_SEED"));
    }

    #[test]
    fn endpoints_required_without_mock() {
        let file = FileConfig::parse("[dataset]\nkind='MedQA'\npath='x'").unwrap();
        assert!(resolve(&file, &env_of(&[]), &Overrides::default()).is_err());
    }

    #[test]
    fn endpoint_fields_are_read() {
        let file = FileConfig::parse(
            r#"
            [pipeline.primary]
            model_id = "p"
            base_url = "http://localhost:8000/v1"
            api_key_env = "PRIMARY_KEY"
            max_tokens = 512
            timeout_ms = 5000
            [pipeline.helper1]
            model_id = "h1"
            base_url = "http://localhost:8001/v1"
            [pipeline.helper2]
            model_id = "h2"
            base_url = "http://localhost:8002/v1"
            [dataset]
            kind = "MedMCQA"
            path = "x"
            "#,
        )
        .unwrap();
        let c = resolve(&file, &env_of(&[]), &Overrides::default()).unwrap();
        assert_eq!(
            c.pipeline.primary.api_key_ref.as_deref(),
            Some("PRIMARY_KEY")
        );
        assert_eq!(c.pipeline.primary.decoding.max_tokens, 512);
        assert_eq!(c.pipeline.primary.decoding.timeout, Duration::from_secs(5));
        assert_eq!(c.pipeline.helper2.role, Role::Helper2);
    }

    #[test]
    fn literal_keys_are_refused() {
        let err = FileConfig::parse("[pipeline.primary]\napi_key = 'sk-123'").unwrap_err();
        assert!(err.to_string().contains("pipeline.primary.api_key"));
        assert!(FileConfig::parse("[run]\nbogus = 1").is_err());
    }

    #[test]
    fn digest_ignores_output_location() {
        let file = FileConfig::parse(FILE).unwrap();
        let a = resolve(&file, &env_of(&[]), &Overrides::default()).unwrap();
        let b = resolve(
            &file,
            &env_of(&[]),
            &Overrides {
                out: Some("elsewhere".into()),
                concurrency: Some(9),
                ..Default::default()
            },
        )
        .unwrap();
        let c = resolve(
            &file,
            &env_of(&[]),
            &Overrides {
                seed: Some(7),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }
}
