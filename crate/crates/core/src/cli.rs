//! The `distiller` command line.
//!
//! Every verb reads an optional `key = value` config file, writes its
//! outputs atomically under `--out` and leaves a `manifest.json` next to
//! them. Exit codes: 0 success, 2 usage or config error, 1 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodistiller::{
    baseline_score, corpus_words, description_words, featurize_dataset, lodo_eval, recommend, train_meta,
    EmbeddingTable, GbdtSettings, IdfTable, MetaModel, MetaRow,
};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, to_jsonl, write_atomic};
use crate::mi::bench::{mi_bench_csv, run_mi_bench, MiBenchSettings};
use crate::nn::encoder::EncoderModel;
use crate::pipeline::config::{hex_digest, int, num, parse_kv, DistillerConfig, CONFIG_KEYS};
use crate::pipeline::data::{ClassificationTask, TaggingTask, TaskData};
use crate::pipeline::eval::evaluate;
use crate::pipeline::train::{distill, init_student, train_supervised, RunRecord, SupervisedSettings};
use crate::rng::{streams, RngStreams};
use crate::search::{fanova_from_records, mean_report, random_search, ForestSettings, ImportanceReport, SearchSpace};

#[derive(Debug, Parser)]
#[command(name = "distiller", version, about = "Knowledge-distillation experiments at desk scale")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every random stream of the command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Generate a synthetic task (data.kind = classification | tagging).
    GenData(Common),
    /// Train the 4-layer teacher on a generated task.
    TrainTeacher(Common),
    /// Run one distillation.
    Distill(Common),
    /// Train MI-alpha critics on correlated Gaussians against the closed form.
    MiBench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Random search over the distillation space.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Importance of the searched components from search records.
    Fanova(Common),
    /// Fit the ratio predictor and run leave-one-dataset-out evaluation.
    MetaTrain(Common),
    /// Rank the search space for a dataset with a trained predictor.
    Recommend {
        #[command(flatten)]
        common: Common,
        #[arg(long = "top-n")]
        top_n: Option<usize>,
    },
}

/// Keys read by the verbs, outside the distillation namespaces.
pub const CLI_KEYS: [(&str, &str); 31] = [
    ("data.dir", "task directory written by gen-data"),
    ("data.kind", "gen-data: classification | tagging"),
    ("data.id", "gen-data: dataset id"),
    ("data.n_train", "gen-data: training examples"),
    ("data.n_test", "gen-data: held-out examples"),
    ("data.vocab_size", "gen-data: vocabulary size"),
    ("data.n_classes", "gen-data: classes (classification) or tags (tagging)"),
    ("data.noise", "gen-data: noise fraction"),
    ("data.min_len", "gen-data: shortest sequence"),
    ("data.max_len", "gen-data: longest sequence"),
    ("teacher.path", "teacher.json written by train-teacher"),
    ("teacher.epochs", "train-teacher epochs"),
    ("teacher.batch_size", "train-teacher batch size"),
    ("teacher.learning_rate", "train-teacher Adam step size"),
    ("mi.steps", "mi-bench training steps"),
    ("mi.batch", "mi-bench batch size"),
    ("mi.d", "mi-bench Gaussian dimension"),
    ("mi.lr", "mi-bench Adam step size"),
    ("mi.rhos", "mi-bench correlations, comma separated"),
    ("mi.alphas", "mi-bench alphas, comma separated"),
    ("search.budget", "number of sampled configs"),
    ("search.workers", "concurrent trials"),
    ("fanova.records", "record files, comma separated"),
    ("fanova.trees", "forest size"),
    ("meta.rows", "precomputed meta rows (jsonl)"),
    ("meta.records", "search record files, comma separated"),
    ("meta.data", "task directories of those records, comma separated"),
    ("meta.embeddings", "word-vector file; the bundled table by default"),
    ("meta.rounds", "boosting rounds"),
    ("meta.model", "meta_model.json written by meta-train"),
    ("recommend.top_n", "configs to return"),
];

const CLI_NAMESPACES: [&str; 7] = ["data", "teacher", "mi", "search", "fanova", "meta", "recommend"];

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Parsed config file plus the seed override.
struct Ctx {
    map: BTreeMap<String, String>,
    seed: u64,
    out: Option<PathBuf>,
    outputs: Vec<String>,
}

impl Ctx {
    fn new(c: &Common) -> CliResult<Self> {
        let map = match &c.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_kv(&text)?
            }
            None => BTreeMap::new(),
        };
        for k in map.keys() {
            let ns = k.split('.').next().unwrap_or("");
            let known = CONFIG_KEYS.iter().chain(&CLI_KEYS).any(|(key, _)| key == k);
            if CLI_NAMESPACES.contains(&ns) && !known {
                return Err(usage(format!("unknown config key '{k}'")));
            }
            if !known && !k.starts_with("preset") && !is_distill_key(k) {
                return Err(usage(format!("unknown config key '{k}'")));
            }
        }
        Ok(Self {
            map,
            seed: c.seed.unwrap_or(0),
            out: c.out.clone(),
            outputs: Vec::new(),
        })
    }

    fn get(&self, k: &str) -> Option<&str> {
        self.map.get(k).map(String::as_str)
    }

    fn path(&self, k: &str) -> CliResult<PathBuf> {
        self.get(k)
            .map(PathBuf::from)
            .ok_or_else(|| usage(format!("config key '{k}' is required")))
    }

    fn list(&self, k: &str) -> Vec<String> {
        self.get(k)
            .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    }

    fn usize_or(&self, k: &str, d: usize) -> CliResult<usize> {
        Ok(self.get(k).map(|v| int(v, k)).transpose()?.unwrap_or(d))
    }

    fn f64_or(&self, k: &str, d: f64) -> CliResult<f64> {
        Ok(self.get(k).map(|v| num(v, k)).transpose()?.unwrap_or(d))
    }

    fn out_dir(&self) -> CliResult<PathBuf> {
        let out = self.out.clone().ok_or_else(|| usage("--out is required"))?;
        std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
        Ok(out)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let dir = self.out_dir()?;
        write_atomic(&dir.join(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn distill_config(&self) -> CliResult<DistillerConfig> {
        let mut map = self.map.clone();
        map.insert("seed".into(), self.seed.to_string());
        Ok(DistillerConfig::from_map(&map)?)
    }

    /// Canonical text of the effective configuration.
    fn canonical(&self) -> String {
        let mut s: String = self.map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        s.push_str(&format!("seed = {}\n", self.seed));
        s
    }

    fn finish(&mut self, verb: &str, config_hash: String) -> CliResult<()> {
        let manifest = Manifest {
            command: verb.to_string(),
            config_hash,
            seed: self.seed,
            versions: Versions {
                distiller: env!("CARGO_PKG_VERSION").to_string(),
                record_format: 1,
            },
            outputs: self.outputs.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&manifest).map_err(Error::from)?;
        let dir = self.out_dir()?;
        write_atomic(&dir.join("manifest.json"), &bytes)?;
        Ok(())
    }
}

fn is_distill_key(k: &str) -> bool {
    k == "seed" || CONFIG_KEYS.iter().any(|(key, _)| *key == k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub distiller: String,
    pub record_format: u32,
}

/// A trained ratio predictor with the document frequencies used to
/// featurise its datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaBundle {
    pub model: MetaModel,
    pub idf: IdfTable,
    pub embeddings: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the verb and returns the exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.verb) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("distiller: {m}");
            2
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("distiller: {m}");
            1
        }
    }
}

fn dispatch(verb: Verb) -> CliResult<()> {
    match verb {
        Verb::GenData(c) => gen_data(Ctx::new(&c)?),
        Verb::TrainTeacher(c) => train_teacher_cmd(Ctx::new(&c)?),
        Verb::Distill(c) => distill_cmd(Ctx::new(&c)?),
        Verb::MiBench { common, rho, alpha } => mi_bench(Ctx::new(&common)?, rho, alpha),
        Verb::Search { common, budget, workers } => search_cmd(Ctx::new(&common)?, budget, workers),
        Verb::Fanova(c) => fanova_cmd(Ctx::new(&c)?),
        Verb::MetaTrain(c) => meta_train(Ctx::new(&c)?),
        Verb::Recommend { common, top_n } => recommend_cmd(Ctx::new(&common)?, top_n),
    }
}

fn gen_data(mut ctx: Ctx) -> CliResult<()> {
    let kind = ctx.get("data.kind").unwrap_or("classification").to_string();
    let n_train = ctx.usize_or("data.n_train", 2000)?;
    let n_test = ctx.usize_or("data.n_test", 500)?;
    let id = ctx.get("data.id").unwrap_or(&kind).to_string();
    let data = match kind.as_str() {
        "classification" => {
            let d = ClassificationTask::default();
            ClassificationTask {
                vocab_size: ctx.usize_or("data.vocab_size", d.vocab_size)?,
                n_classes: ctx.usize_or("data.n_classes", d.n_classes)?,
                noise: ctx.f64_or("data.noise", d.noise)?,
                min_len: ctx.usize_or("data.min_len", d.min_len)?,
                max_len: ctx.usize_or("data.max_len", d.max_len)?,
                ..d
            }
            .generate(&id, n_train, n_test, ctx.seed)?
        }
        "tagging" => {
            let d = TaggingTask::default();
            TaggingTask {
                vocab_size: ctx.usize_or("data.vocab_size", d.vocab_size)?,
                n_tags: ctx.usize_or("data.n_classes", d.n_tags)?,
                noise: ctx.f64_or("data.noise", d.noise)?,
                min_len: ctx.usize_or("data.min_len", d.min_len)?,
                max_len: ctx.usize_or("data.max_len", d.max_len)?,
                ..d
            }
            .generate(&id, n_train, n_test, ctx.seed)?
        }
        other => return Err(usage(format!("data.kind must be classification or tagging, got '{other}'"))),
    };
    let dir = ctx.out_dir()?;
    data.save(&dir)?;
    ctx.outputs
        .extend(["meta.json", "train.jsonl", "test.jsonl", "lexicon.tsv"].map(String::from));
    println!("wrote {} train / {} test examples to {}", data.train.len(), data.test.len(), dir.display());
    let h = hex_digest(ctx.canonical().as_bytes());
    ctx.finish("gen-data", h)
}

fn supervised(ctx: &Ctx) -> CliResult<SupervisedSettings> {
    let d = SupervisedSettings::default();
    Ok(SupervisedSettings {
        epochs: ctx.usize_or("teacher.epochs", d.epochs)?,
        batch_size: ctx.usize_or("teacher.batch_size", d.batch_size)?,
        learning_rate: ctx.f64_or("teacher.learning_rate", d.learning_rate)?,
        seed: ctx.seed,
    })
}

fn load_data(ctx: &Ctx) -> CliResult<TaskData> {
    Ok(TaskData::load(&ctx.path("data.dir")?)?)
}

fn load_teacher(ctx: &Ctx) -> CliResult<EncoderModel> {
    Ok(EncoderModel::load(&ctx.path("teacher.path")?)?)
}

fn train_teacher_cmd(mut ctx: Ctx) -> CliResult<()> {
    let data = load_data(&ctx)?;
    let settings = supervised(&ctx)?;
    let cfg = crate::nn::encoder::EncoderConfig::teacher(data.meta.vocab_size, data.meta.n_classes, data.meta.kind);
    let mut rng = RngStreams::new(settings.seed).stream(streams::MODEL_INIT);
    let model = EncoderModel::new(cfg, &mut rng)?;
    let (model, losses) = train_supervised(model, &data.train, &settings)?;
    let score = evaluate(&model, &data.test, data.meta.kind)?;
    ctx.write("teacher.json", &serde_json::to_vec(&model).map_err(Error::from)?)?;
    let metrics = serde_json::json!({ "dataset_id": data.meta.id, "teacher_score": score, "epoch_losses": losses });
    ctx.write("metrics.json", &serde_json::to_vec_pretty(&metrics).map_err(Error::from)?)?;
    println!("teacher held-out score {score:.4}");
    let h = hex_digest(ctx.canonical().as_bytes());
    ctx.finish("train-teacher", h)
}

fn distill_cmd(mut ctx: Ctx) -> CliResult<()> {
    let config = ctx.distill_config()?;
    let data = load_data(&ctx)?;
    let teacher = load_teacher(&ctx)?;
    let out = distill(&config, &data, &teacher, init_student(&config, &data.meta)?)?;
    let record = out.record.without_time();
    ctx.write("record.jsonl", &to_jsonl(std::slice::from_ref(&record))?)?;
    ctx.write("student.json", &serde_json::to_vec(&out.student).map_err(Error::from)?)?;
    let mut losses = String::from("epoch,loss\n");
    for (e, l) in out.epoch_losses.iter().enumerate() {
        losses.push_str(&format!("{},{l:.9}\n", e + 1));
    }
    ctx.write("epoch_losses.csv", losses.as_bytes())?;
    let timings = serde_json::json!({ "wall_time": out.record.wall_time });
    ctx.write("timings.json", &serde_json::to_vec_pretty(&timings).map_err(Error::from)?)?;
    println!(
        "student {:.4} / teacher {:.4} = ratio {:.4}",
        record.student_score, record.teacher_score, record.distillation_ratio
    );
    ctx.finish("distill", config.hash())
}

fn parse_f64_list(ctx: &Ctx, k: &str) -> CliResult<Option<Vec<f64>>> {
    let items = ctx.list(k);
    if items.is_empty() {
        return Ok(None);
    }
    Ok(Some(items.iter().map(|v| num(v, k)).collect::<Result<Vec<_>>>()?))
}

fn mi_bench(mut ctx: Ctx, rho: Option<f64>, alpha: Option<f64>) -> CliResult<()> {
    let d = MiBenchSettings::default();
    let settings = MiBenchSettings {
        rhos: match rho {
            Some(r) => vec![r],
            None => parse_f64_list(&ctx, "mi.rhos")?.unwrap_or(d.rhos),
        },
        alphas: match alpha {
            Some(a) => vec![a],
            None => parse_f64_list(&ctx, "mi.alphas")?.unwrap_or(d.alphas),
        },
        d: ctx.usize_or("mi.d", d.d)?,
        batch: ctx.usize_or("mi.batch", d.batch)?,
        steps: ctx.usize_or("mi.steps", d.steps)?,
        lr: ctx.f64_or("mi.lr", d.lr)?,
        seeds: vec![ctx.seed],
        arch: d.arch,
    };
    for &a in &settings.alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(usage(format!("alpha {a} outside [0, 1]")));
        }
    }
    for &r in &settings.rhos {
        if !(r.abs() < 1.0) {
            return Err(usage(format!("rho {r} must satisfy |rho| < 1")));
        }
    }
    let rows = run_mi_bench(&settings)?;
    let csv = mi_bench_csv(&rows);
    print!("{csv}");
    if ctx.out.is_some() {
        ctx.write("mi_bench.csv", csv.as_bytes())?;
        let h = hex_digest(format!("{}{}", ctx.canonical(), serde_json::to_string(&settings).map_err(Error::from)?).as_bytes());
        ctx.finish("mi-bench", h)?;
    }
    Ok(())
}

fn search_cmd(mut ctx: Ctx, budget: Option<usize>, workers: Option<usize>) -> CliResult<()> {
    let budget = match budget {
        Some(b) => b,
        None => ctx.usize_or("search.budget", 20)?,
    };
    let workers = match workers {
        Some(w) => w,
        None => ctx.usize_or("search.workers", 1)?,
    };
    if workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let base = ctx.distill_config()?;
    let data = load_data(&ctx)?;
    let teacher = load_teacher(&ctx)?;
    let space = SearchSpace::default();
    let records = random_search(
        &space,
        budget,
        ctx.seed,
        &base,
        &data.meta.id,
        data.meta.kind,
        workers,
        |c| Ok(distill(c, &data, &teacher, init_student(c, &data.meta)?)?.record),
    )?;
    let clean: Vec<RunRecord> = records.iter().map(RunRecord::without_time).collect();
    ctx.write("records.jsonl", &to_jsonl(&clean)?)?;
    let mut timings = String::from("trial,wall_time\n");
    for r in &records {
        timings.push_str(&format!("{},{}\n", r.trial, r.wall_time.map_or(String::new(), |t| format!("{t:.3}"))));
    }
    ctx.write("timings.csv", timings.as_bytes())?;
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    println!("{} trials, {failed} failed", records.len());
    let h = hex_digest(format!("{}budget = {budget}\n{}", ctx.canonical(), base.to_text()).as_bytes());
    ctx.finish("search", h)
}

fn read_records(paths: &[String]) -> CliResult<Vec<RunRecord>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_jsonl::<RunRecord>(Path::new(p))?);
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FanovaOutput {
    per_dataset: BTreeMap<String, ImportanceReport>,
    mean: ImportanceReport,
}

fn fanova_cmd(mut ctx: Ctx) -> CliResult<()> {
    let files = ctx.list("fanova.records");
    if files.is_empty() {
        return Err(usage("config key 'fanova.records' is required"));
    }
    let records = read_records(&files)?;
    let settings = ForestSettings {
        trees: ctx.usize_or("fanova.trees", 64)?,
        seed: ctx.seed,
        ..ForestSettings::default()
    };
    let mut by_ds: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        by_ds.entry(r.dataset_id.clone()).or_default().push(r);
    }
    let mut per_dataset = BTreeMap::new();
    for (id, recs) in &by_ds {
        per_dataset.insert(id.clone(), fanova_from_records(recs, &settings)?);
    }
    let reports: Vec<ImportanceReport> = per_dataset.values().cloned().collect();
    let out = FanovaOutput {
        mean: mean_report(&reports)?,
        per_dataset,
    };
    ctx.write("importance.json", &serde_json::to_vec_pretty(&out).map_err(Error::from)?)?;
    let mut csv = String::from("dataset,kind,axis_a,axis_b,fraction\n");
    for (id, r) in out.per_dataset.iter().chain([(&"mean".to_string(), &out.mean)]) {
        for line in r.to_csv().lines().skip(1) {
            csv.push_str(&format!("{id},{line}\n"));
        }
    }
    ctx.write("importance.csv", csv.as_bytes())?;
    print!("{}", out.mean.to_csv());
    let h = hex_digest(ctx.canonical().as_bytes());
    ctx.finish("fanova", h)
}

fn embeddings(ctx: &Ctx) -> CliResult<(EmbeddingTable, Option<PathBuf>)> {
    Ok(match ctx.get("meta.embeddings") {
        Some(p) => (EmbeddingTable::load(Path::new(p))?, Some(PathBuf::from(p))),
        None => (EmbeddingTable::bundled(), None),
    })
}

/// Meta rows for search records over the given task directories.
pub fn build_meta_rows(
    records: &[RunRecord],
    datasets: &[TaskData],
    table: &EmbeddingTable,
    baseline: &SupervisedSettings,
) -> Result<(Vec<MetaRow>, IdfTable)> {
    let corpora: Vec<Vec<Vec<String>>> = datasets.iter().map(corpus_words).collect();
    let idf = IdfTable::new(corpora.iter().map(Vec::as_slice));
    let mut rows = Vec::new();
    for (data, corpus) in datasets.iter().zip(&corpora) {
        let recs: Vec<&RunRecord> = records
            .iter()
            .filter(|r| r.dataset_id == data.meta.id && r.is_ok())
            .collect();
        let Some(first) = recs.first() else {
            continue;
        };
        let features = featurize_dataset(
            corpus,
            &description_words(&data.meta.description),
            table,
            &idf,
            baseline_score(data, baseline)?,
            first.teacher_score,
        )?;
        rows.extend(recs.into_iter().map(|r| MetaRow {
            record: r.clone(),
            features: features.clone(),
        }));
    }
    Ok((rows, idf))
}

fn gbdt_settings(ctx: &Ctx) -> CliResult<GbdtSettings> {
    Ok(GbdtSettings {
        rounds: ctx.usize_or("meta.rounds", 200)?,
        seed: ctx.seed,
        ..GbdtSettings::default()
    })
}

fn meta_train(mut ctx: Ctx) -> CliResult<()> {
    let (table, emb_path) = embeddings(&ctx)?;
    let (rows, idf) = if let Some(p) = ctx.get("meta.rows") {
        let rows: Vec<MetaRow> = read_jsonl(Path::new(p))?;
        (rows, IdfTable::new(std::iter::empty()))
    } else {
        let rec_files = ctx.list("meta.records");
        let dirs = ctx.list("meta.data");
        if rec_files.is_empty() || dirs.is_empty() {
            return Err(usage("meta-train needs meta.rows, or meta.records with meta.data"));
        }
        let records = read_records(&rec_files)?;
        let datasets = dirs
            .iter()
            .map(|d| TaskData::load(Path::new(d)))
            .collect::<Result<Vec<_>>>()?;
        let baseline = SupervisedSettings {
            seed: ctx.seed,
            ..SupervisedSettings::default()
        };
        build_meta_rows(&records, &datasets, &table, &baseline)?
    };
    let settings = gbdt_settings(&ctx)?;
    let model = train_meta(&rows, &settings)?;
    ctx.write("meta_rows.jsonl", &to_jsonl(&rows)?)?;
    let bundle = MetaBundle {
        model,
        idf,
        embeddings: emb_path,
    };
    ctx.write("meta_model.json", &serde_json::to_vec(&bundle).map_err(Error::from)?)?;
    match lodo_eval(&rows, &settings) {
        Ok(report) => {
            for f in &report.folds {
                let s = f.spearman.map_or("undefined".to_string(), |v| format!("{v:.4}"));
                println!("lodo {} ({} rows): spearman {s}", f.dataset_id, f.n_rows);
            }
            if let Some(m) = report.mean_spearman {
                println!("lodo mean spearman {m:.4}");
            }
            ctx.write("lodo.json", &serde_json::to_vec_pretty(&report).map_err(Error::from)?)?;
        }
        Err(e) => println!("lodo skipped: {e}"),
    }
    let h = hex_digest(ctx.canonical().as_bytes());
    ctx.finish("meta-train", h)
}

fn recommend_cmd(mut ctx: Ctx, top_n: Option<usize>) -> CliResult<()> {
    let n = match top_n {
        Some(n) => n,
        None => ctx.usize_or("recommend.top_n", 5)?,
    };
    if n == 0 {
        return Err(usage("--top-n must be at least 1"));
    }
    let bundle: MetaBundle = serde_json::from_slice(&std::fs::read(ctx.path("meta.model")?).map_err(Error::from)?)
        .map_err(Error::from)?;
    let table = match &bundle.embeddings {
        Some(p) => EmbeddingTable::load(p)?,
        None => embeddings(&ctx)?.0,
    };
    let data = load_data(&ctx)?;
    let teacher = load_teacher(&ctx)?;
    let teacher_score = evaluate(&teacher, &data.test, data.meta.kind)?;
    let baseline = SupervisedSettings {
        seed: ctx.seed,
        ..SupervisedSettings::default()
    };
    let features = featurize_dataset(
        &corpus_words(&data),
        &description_words(&data.meta.description),
        &table,
        &bundle.idf,
        baseline_score(&data, &baseline)?,
        teacher_score,
    )?;
    let base = ctx.distill_config()?;
    let recs = recommend(&bundle.model, &features, &SearchSpace::default(), &base, n)?;
    for r in &recs {
        println!(
            "{:>3}. predicted ratio {:.4}  inter={} pred={} mapping={} aug={}",
            r.rank,
            r.predicted_ratio,
            r.config.inter_loss,
            r.config.pred_loss,
            r.config.mapping,
            r.config.aug.label()
        );
    }
    ctx.write("recommendations.jsonl", &to_jsonl(&recs)?)?;
    let h = hex_digest(ctx.canonical().as_bytes());
    ctx.finish("recommend", h)
}

/// Wall time of a closure, for progress messages.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}
