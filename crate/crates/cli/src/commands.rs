use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use cure_core::client::{
    ChatBackend, Client, ClientOptions, HttpBackend, MockBackend, MockScript, ResponseCache,
};
use cure_core::datasets::{self, DatasetSpec};
use cure_core::domain::{Dataset, Mode, PipelineRecord, Question};
use cure_core::engine::{Engine, EngineError};
use cure_core::evalharness::{
    self, compute_metrics, emit_report, published_fixture, HarnessError, Metrics, ReportBundle,
    ReportRow,
};
use cure_core::prompts::TemplateId;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{self, FileConfig, Overrides, RunConfig};

/// An error and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: e.into(),
        }
    }

    pub fn coverage(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: e.into(),
        }
    }

    pub fn backend(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 3,
            error: e.into(),
        }
    }

    /// Output errors are reported like configuration errors: the operator
    /// has to fix something on their side.
    fn io(e: impl Into<anyhow::Error>) -> Self {
        Self::config(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub config: RunConfig,
    pub templates: BTreeMap<String, String>,
    pub timestamp: String,
    pub dataset_digest: String,
    pub n_questions: usize,
    pub n_skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script_digest: Option<String>,
}

#[derive(Debug, Serialize)]
struct Summary {
    mode: Mode,
    records: usize,
    errors: usize,
    backend_calls: u64,
    cache_hits: u64,
}

fn template_digests() -> BTreeMap<String, String> {
    TemplateId::ALL
        .iter()
        .map(|t| (t.short_name().to_string(), t.version_digest()))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::io)
}

fn file_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let from_env = config::process_env("CURE_CONFIG").map(PathBuf::from);
    match path.map(Path::to_path_buf).or(from_env) {
        Some(p) => FileConfig::load(&p).map_err(Failure::config),
        None => Ok(FileConfig::default()),
    }
}

struct Prepared {
    cfg: RunConfig,
    questions: Vec<Question>,
    n_skipped: usize,
    script: Option<(MockScript, String)>,
}

fn load_questions(spec: &DatasetSpec) -> Result<(Vec<Question>, usize), Failure> {
    let (questions, report) = datasets::load_sampled(spec)
        .with_context(|| format!("loading {} from {}", spec.kind, spec.path.display()))
        .map_err(Failure::config)?;
    if !report.skipped.is_empty() {
        tracing::warn!(
            skipped = report.skipped.len(),
            "records skipped while loading"
        );
    }
    Ok((questions, report.skipped.len()))
}

fn load_script(path: Option<&Path>) -> Result<Option<(MockScript, String)>, Failure> {
    let Some(path) = path else { return Ok(None) };
    let bytes = fs::read(path)
        .with_context(|| format!("cannot read mock script {}", path.display()))
        .map_err(Failure::config)?;
    let script = MockScript::load(path)
        .with_context(|| format!("in mock script {}", path.display()))
        .map_err(Failure::config)?;
    Ok(Some((script, hex::encode(Sha256::digest(bytes)))))
}

/// Everything is checked before anything is written.
fn prepare(cfg: RunConfig) -> Result<Prepared, Failure> {
    let (questions, n_skipped) = load_questions(&cfg.dataset)?;
    let script = load_script(cfg.mock_script.as_deref())?;
    Ok(Prepared {
        cfg,
        questions,
        n_skipped,
        script,
    })
}

fn build_client(cfg: &RunConfig, script: Option<&MockScript>) -> Result<Arc<Client>, Failure> {
    let backend: Arc<dyn ChatBackend> = match script {
        Some(s) => Arc::new(MockBackend::new(s.clone())),
        None => Arc::new(HttpBackend::new()),
    };
    let opts = ClientOptions {
        max_retries: cfg.max_retries,
        concurrency: cfg.concurrency,
        ..ClientOptions::default()
    };
    let mut client = Client::new(backend, opts);
    if let Some(dir) = &cfg.cache_dir {
        let cache = ResponseCache::on_disk(dir)
            .with_context(|| format!("cannot open cache {}", dir.display()))
            .map_err(Failure::config)?;
        client = client.with_cache(Arc::new(cache));
    }
    Ok(Arc::new(client))
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    question_id: &'a str,
    error: String,
}

/// Runs the pipeline and writes the run directory. Returns the metrics
/// when every question produced a record.
async fn execute(p: &Prepared, out_dir: &Path) -> Result<Metrics, Failure> {
    let cfg = &p.cfg;
    let client = build_client(cfg, p.script.as_ref().map(|(s, _)| s))?;
    let engine = Engine::new(cfg.pipeline.clone(), client.clone()).map_err(Failure::config)?;
    let results = engine
        .run_batch(cfg.mode, &p.questions, cfg.concurrency)
        .await;

    let mut records: Vec<PipelineRecord> = Vec::new();
    let mut failures: Vec<(&str, EngineError)> = Vec::new();
    for (q, r) in p.questions.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push((q.id(), e)),
        }
    }

    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))
        .map_err(Failure::io)?;
    let io = |e: HarnessError| Failure::io(e);
    datasets::write_jsonl(&p.questions, &out_dir.join("questions.jsonl")).map_err(Failure::io)?;
    evalharness::write_records(&records, &out_dir.join("records.jsonl")).map_err(io)?;
    evalharness::write_telemetry(&records, &out_dir.join("telemetry.jsonl")).map_err(io)?;
    let manifest = Manifest {
        config_digest: cfg.digest(),
        config: cfg.clone(),
        templates: template_digests(),
        timestamp: chrono::Utc::now().to_rfc3339(),
        dataset_digest: datasets::dataset_digest(&p.questions),
        n_questions: p.questions.len(),
        n_skipped: p.n_skipped,
        mock_script_digest: p.script.as_ref().map(|(_, d)| d.clone()),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    let summary = Summary {
        mode: cfg.mode,
        records: records.len(),
        errors: failures.len(),
        backend_calls: client.backend_calls(),
        cache_hits: client.cache_hits(),
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    tracing::info!(
        mode = %cfg.mode,
        records = summary.records,
        backend_calls = summary.backend_calls,
        cache_hits = summary.cache_hits,
        "run finished"
    );

    if let Some((_, first)) = failures.first() {
        let mut lines = String::new();
        for (id, e) in &failures {
            let line = ErrorLine {
                question_id: id,
                error: e.to_string(),
            };
            lines.push_str(&serde_json::to_string(&line).expect("serializes"));
            lines.push('\n');
        }
        fs::write(out_dir.join("errors.jsonl"), lines).map_err(Failure::io)?;
        return Err(Failure::backend(anyhow!(
            "{} of {} questions failed; first: {first}",
            failures.len(),
            p.questions.len()
        )));
    }

    let metrics = compute_metrics(&records, &p.questions, cfg.mode).map_err(|e| match e {
        HarnessError::CoverageGap { .. } => Failure::coverage(e),
        other => Failure::backend(other),
    })?;
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

fn from_manifest(path: &Path, flags: &Overrides) -> Result<(RunConfig, Manifest), Failure> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("cannot read manifest {}", path.display()))
        .map_err(Failure::config)?;
    let manifest: Manifest = serde_json::from_str(&raw)
        .with_context(|| format!("malformed manifest {}", path.display()))
        .map_err(Failure::config)?;
    if manifest.config.digest() != manifest.config_digest {
        return Err(Failure::config(anyhow!(
            "manifest config does not match its recorded digest"
        )));
    }
    let mut cfg = manifest.config.clone();
    if let Some(out) = &flags.out {
        cfg.out_dir = out.clone();
    }
    if let Some(cache) = &flags.cache {
        cfg.cache_dir = Some(cache.clone());
    }
    if let Some(c) = flags.concurrency {
        cfg.concurrency = c;
    }
    Ok((cfg, manifest))
}

pub async fn run(
    config_path: Option<&Path>,
    flags: &Overrides,
    manifest_path: Option<&Path>,
) -> Result<(), Failure> {
    let prepared = match manifest_path {
        Some(m) => {
            let (cfg, manifest) = from_manifest(m, flags)?;
            let p = prepare(cfg)?;
            if datasets::dataset_digest(&p.questions) != manifest.dataset_digest {
                return Err(Failure::config(anyhow!(
                    "dataset sample differs from the one recorded in the manifest"
                )));
            }
            if p.script.as_ref().map(|(_, d)| d) != manifest.mock_script_digest.as_ref() {
                return Err(Failure::config(anyhow!(
                    "mock script differs from the one recorded in the manifest"
                )));
            }
            p
        }
        None => {
            let file = file_config(config_path)?;
            let cfg =
                config::resolve(&file, &config::process_env, flags).map_err(Failure::config)?;
            prepare(cfg)?
        }
    };
    let out = prepared.cfg.out_dir.clone();
    let m = execute(&prepared, &out).await?;
    println!(
        "{} {} n={} accuracy={:.3}",
        m.dataset, m.mode, m.n_total, m.acc_overall
    );
    Ok(())
}

pub async fn ablate(
    config_path: Option<&Path>,
    flags: &Overrides,
    modes: Option<Vec<String>>,
) -> Result<(), Failure> {
    let modes: Vec<Mode> = match modes {
        None => Mode::ALL.to_vec(),
        Some(list) => {
            let list: Vec<&String> = list.iter().filter(|m| !m.trim().is_empty()).collect();
            if list.is_empty() {
                return Err(Failure::config(anyhow!("--modes is empty")));
            }
            list.iter()
                .map(|m| config::parse_mode(m))
                .collect::<Result<_, _>>()
                .map_err(Failure::config)?
        }
    };
    let file = file_config(config_path)?;
    let base = config::resolve(&file, &config::process_env, flags).map_err(Failure::config)?;
    let mut prepared = prepare(base)?;
    let root = prepared.cfg.out_dir.clone();

    let mut bundle = ReportBundle::new("Variant");
    for mode in modes {
        prepared.cfg.mode = mode;
        prepared.cfg.out_dir = root.join(mode.slug());
        let m = execute(&prepared, &prepared.cfg.out_dir.clone()).await?;
        println!(
            "{} {} n={} accuracy={:.3}",
            m.dataset, m.mode, m.n_total, m.acc_overall
        );
        let label = mode.table_label(&prepared.cfg.pipeline.primary.model_id);
        bundle
            .rows
            .push(ReportRow::computed(label, mode, vec![m]).map_err(Failure::config)?);
    }
    emit_report(&bundle, &root.join("comparison")).map_err(Failure::io)?;
    print!("{}", bundle.to_markdown());
    Ok(())
}

pub fn ablate_fixture(out: &Path) -> Result<(), Failure> {
    let bundle = published_fixture()
        .ablation_table()
        .map_err(Failure::config)?;
    emit_report(&bundle, out).map_err(Failure::io)?;
    print!("{}", bundle.to_markdown());
    Ok(())
}

struct LoadedRun {
    manifest: Manifest,
    metrics: Metrics,
}

fn load_run(dir: &Path) -> anyhow::Result<LoadedRun> {
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(dir.join("manifest.json")).context("cannot read manifest.json")?,
    )
    .context("malformed manifest.json")?;
    let questions = datasets::read_jsonl(&dir.join("questions.jsonl"))?;
    if datasets::dataset_digest(&questions) != manifest.dataset_digest {
        anyhow::bail!("questions.jsonl does not match the manifest's dataset digest");
    }
    let records = evalharness::read_records(&dir.join("records.jsonl"))?;
    let metrics = compute_metrics(&records, &questions, manifest.config.mode)?;
    Ok(LoadedRun { manifest, metrics })
}

pub fn report(runs: &[PathBuf], out: &Path, fixture: bool) -> Result<(), Failure> {
    if runs.is_empty() && !fixture {
        return Err(Failure::config(anyhow!(
            "give run directories or --fixture"
        )));
    }
    let mut bundle = if fixture {
        published_fixture()
            .methods_table()
            .map_err(Failure::config)?
    } else {
        ReportBundle::new("Variant")
    };

    // One row per (mode, primary model), one cell per dataset.
    let mut rows: Vec<((Mode, String), Vec<Metrics>)> = Vec::new();
    let mut index: HashMap<(Mode, String), usize> = HashMap::new();
    for dir in runs {
        let run = load_run(dir)
            .with_context(|| format!("unreadable run {}", dir.display()))
            .map_err(Failure::coverage)?;
        let key = (
            run.manifest.config.mode,
            run.manifest.config.pipeline.primary.model_id.clone(),
        );
        let i = *index.entry(key.clone()).or_insert_with(|| {
            rows.push((key, Vec::new()));
            rows.len() - 1
        });
        if rows[i].1.iter().any(|m| m.dataset == run.metrics.dataset) {
            return Err(Failure::coverage(anyhow!(
                "{}: a second {} run for the same variant",
                dir.display(),
                run.metrics.dataset
            )));
        }
        rows[i].1.push(run.metrics);
    }
    for ((mode, model), mut metrics) in rows {
        metrics.sort_by_key(|m| Dataset::ALL.iter().position(|d| *d == m.dataset));
        let row = ReportRow::computed(mode.table_label(&model), mode, metrics)
            .map_err(Failure::coverage)?;
        bundle.rows.push(row);
    }
    emit_report(&bundle, out).map_err(Failure::io)?;
    print!("{}", bundle.to_markdown());
    Ok(())
}

pub fn inspect(
    what: &str,
    name: Option<&str>,
    dataset: Option<String>,
    data: Option<PathBuf>,
    format: Option<String>,
) -> Result<(), Failure> {
    match what {
        "templates" | "template" => match name {
            None => {
                for t in TemplateId::ALL {
                    println!("{}\t{}", t.short_name(), t.version_digest());
                }
                Ok(())
            }
            Some(n) => {
                let t = TemplateId::from_short_name(n)
                    .ok_or_else(|| Failure::config(anyhow!("unknown template `{n}`")))?;
                println!("{}", t.text());
                Ok(())
            }
        },
        "dataset" => {
            let kind = dataset
                .as_deref()
                .and_then(Dataset::from_name)
                .ok_or_else(|| {
                    Failure::config(anyhow!("--dataset MedQA|MedMCQA|PubMedQA is required"))
                })?;
            let path = data.ok_or_else(|| Failure::config(anyhow!("--data is required")))?;
            let mut spec = DatasetSpec::new(kind, path);
            if let Some(f) = format {
                spec.format = serde_json::from_value(serde_json::Value::String(f.to_lowercase()))
                    .map_err(|_| Failure::config(anyhow!("unknown format `{f}`")))?;
            }
            let report = datasets::load(&spec).map_err(Failure::config)?;
            print!("{}", datasets::to_jsonl(&report.questions));
            for s in &report.skipped {
                eprintln!("skipped line {}: {} ({})", s.line, s.reason, s.detail);
            }
            Ok(())
        }
        other => Err(Failure::config(anyhow!(
            "unknown inspect target `{other}` (expected templates or dataset)"
        ))),
    }
}
