//! `mlct`: corpus generation, two-stage training, sampling, evaluation and ablations.

mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use mlct_core::clustering::ClusterDictionary;
use mlct_core::codec::Codec;
use mlct_core::config::{RunConfig, ENGINE_VERSION};
use mlct_core::corpus::{Corpus, MotionSequence};
use mlct_core::netcore::checkpoint::Checkpoint;
use mlct_core::oracle::ScoreBaseline;
use mlct_core::pipeline::{self, Generated, Reference, Requests};
use mlct_core::sampler::{ConsistencyModel, SampleOptions};
use mlct_core::trainer::{append_log, train, LogRow};
use mlct_core::Error;

use plot::{line_chart, Series};

#[derive(Parser)]
#[command(name = "mlct", version, about = "Latent consistency training on toy motion corpora")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (key = value); defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Guidance scale override.
    #[arg(long, global = true)]
    omega: Option<f64>,
    /// Sampling steps override.
    #[arg(long, global = true)]
    nfe: Option<usize>,
    /// Extra overrides, `key=value`, repeatable; given before the subcommand.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding the default artifact paths.
    #[arg(long, global = true, default_value = "mlct-run")]
    dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the documented default configuration.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the toy corpus.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1: fit the motion codec.
    TrainCodec {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// SVG loss curve.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Build the clustering dictionary over training latents.
    BuildDict {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2: consistency training in the frozen latent space.
    TrainCm {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV training log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// SVG loss curves.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Train the conventional many-step baseline.
    TrainBaseline {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate motions for the held-out captions.
    Sample {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Consistency or baseline checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reuse the initial noise at every re-noising step.
        #[arg(long)]
        reuse_noise: bool,
        /// SVG of decoded trajectories.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Score a sample file against the held-out split.
    Evaluate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Metric records, one JSON object per line.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis through the full pipeline.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Axis {
    Omega,
    Level,
    Tokens,
    Clusters,
    Clustering,
    Quantization,
}

impl Axis {
    fn key(self) -> &'static str {
        match self {
            Axis::Omega => "omega",
            Axis::Level => "level",
            Axis::Tokens => "tokens",
            Axis::Clusters => "clusters",
            Axis::Clustering => "use_clustering",
            Axis::Quantization => "latent_mode",
        }
    }

    fn config_value(self, v: &str) -> String {
        match (self, v) {
            (Axis::Clustering, "on") => "true".into(),
            (Axis::Clustering, "off") => "false".into(),
            (Axis::Quantization, "on" | "true") => "quantized".into(),
            (Axis::Quantization, "off" | "false") => "raw".into(),
            _ => v.to_string(),
        }
    }

    fn touches_codec(self) -> bool {
        matches!(self, Axis::Level | Axis::Tokens | Axis::Quantization)
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("override `{kv}` is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(w) = c.omega {
        cfg.omega = w;
    }
    if let Some(n) = c.nfe {
        cfg.nfe = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let cfg = load_config(c)?;
    let path = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| c.dir.join(name));
    match &cli.command {
        Command::InitConfig { out } => {
            let out = path(out, "config.txt");
            write_file(&out, cfg.to_documented_text().as_bytes())?;
        }
        Command::GenData { out } => {
            let out = path(out, "corpus.mlct");
            let corpus = pipeline::generate_corpus(&cfg)?;
            write_file(&out, &corpus.to_bytes()?)?;
            write_provenance(&out, &cfg, &[("kind", "corpus".into())])?;
            eprintln!("wrote {} sequences to {}", corpus.len(), out.display());
        }
        Command::TrainCodec { corpus, out, plot } => {
            let corpus = Corpus::read(path(corpus, "corpus.mlct"))?;
            let (train_items, _) = corpus.split();
            let (codec, losses) = pipeline::fit_codec(&cfg, &train_items)?;
            let mut ckpt = Checkpoint::new();
            codec.write_into(&mut ckpt);
            let out = path(out, "codec.mlck");
            save_checkpoint(&out, ckpt, &cfg, "codec")?;
            if let Some(p) = plot {
                let pts = losses.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect();
                write_file(p, line_chart("codec loss", &[Series { name: "recon".into(), points: pts }]).as_bytes())?;
            }
            eprintln!("codec final loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::BuildDict { corpus, codec, out } => {
            let corpus = Corpus::read(path(corpus, "corpus.mlct"))?;
            let codec = load_codec(&path(codec, "codec.mlck"))?;
            let data = training_data(&cfg, &corpus, &codec)?;
            let mut cfg_on = cfg.clone();
            cfg_on.use_clustering = true;
            let dict = pipeline::fit_dictionary(&cfg_on, &data)?.expect("clustering enabled");
            let mut ckpt = Checkpoint::new();
            dict.write_into(&mut ckpt);
            let out = path(out, "dict.mlck");
            save_checkpoint(&out, ckpt, &cfg, "dictionary")?;
            eprintln!("dictionary with {} clusters", dict.len());
        }
        Command::TrainCm { corpus, codec, dict, out, log, plot } => {
            let corpus = Corpus::read(path(corpus, "corpus.mlct"))?;
            let codec = load_codec(&path(codec, "codec.mlck"))?;
            let data = training_data(&cfg, &corpus, &codec)?;
            let dict = if cfg.use_clustering {
                let ckpt = load_checkpoint(&path(dict, "dict.mlck"), "dictionary")?;
                Some(ClusterDictionary::read_from(&ckpt)?)
            } else {
                None
            };
            let mut trainer = pipeline::new_consistency_trainer(&cfg, dict)?;
            let rows = train(&mut trainer, &data)?;
            let out = path(out, "cm.mlck");
            save_checkpoint(&out, trainer.to_checkpoint(), &cfg, "consistency")?;
            if let Some(p) = log {
                if p.exists() {
                    fs::remove_file(p)?;
                }
                ensure_parent(p)?;
                append_log(p, &rows)?;
            }
            if let Some(p) = plot {
                write_file(p, loss_plot(&rows).as_bytes())?;
            }
            if let Some(r) = rows.last() {
                eprintln!("step {} consistency {:.5} uncond {:.5}", r.step, r.losses.consistency, r.losses.uncond);
            }
        }
        Command::TrainBaseline { corpus, codec, out } => {
            let corpus = Corpus::read(path(corpus, "corpus.mlct"))?;
            let codec = load_codec(&path(codec, "codec.mlck"))?;
            let data = training_data(&cfg, &corpus, &codec)?;
            let (baseline, losses) = pipeline::fit_baseline(&cfg, &data)?;
            let out = path(out, "baseline.mlck");
            save_checkpoint(&out, baseline.to_checkpoint(), &cfg, "baseline")?;
            eprintln!("baseline final loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Sample { corpus, codec, model, out, reuse_noise, plot } => {
            let corpus = Corpus::read(path(corpus, "corpus.mlct"))?;
            let codec = load_codec(&path(codec, "codec.mlck"))?;
            let (_, held_out) = corpus.split();
            let reqs = Requests::from_items(&pipeline::vocabulary(&cfg), &held_out, cfg.sample_repeats)?;
            let model_path = path(model, "cm.mlck");
            let ckpt = load_checkpoint(&model_path, "")?;
            let seed = mlct_core::rng::sub_seed(cfg.seed, "sampling");
            let generated = match ckpt.meta("run.kind") {
                Some("baseline") => {
                    let b = ScoreBaseline::from_checkpoint(&ckpt)?;
                    pipeline::generate_baseline(&b, &codec, &reqs, cfg.oracle_steps, seed)?
                }
                Some("consistency") => {
                    let m = ConsistencyModel::from_checkpoint(&ckpt)?;
                    let options = SampleOptions { nfe: cfg.nfe, seed, reuse_noise: *reuse_noise };
                    pipeline::generate_consistency(&m, &codec, &reqs, options)?
                }
                other => bail!("{} is not a model checkpoint (kind {:?})", model_path.display(), other),
            };
            let out = path(out, "samples.mlct");
            write_file(&out, &generated.to_corpus()?.to_bytes()?)?;
            write_provenance(
                &out,
                &cfg,
                &[
                    ("kind", "samples".into()),
                    ("nfe", generated.evaluations.to_string()),
                    ("reuse_noise", reuse_noise.to_string()),
                ],
            )?;
            if let Some(p) = plot {
                write_file(p, trajectory_plot(&generated).as_bytes())?;
            }
            eprintln!("wrote {} samples at {} evaluations", generated.motions.len(), generated.evaluations);
        }
        Command::Evaluate { corpus, samples, out } => {
            let corpus = Corpus::read(path(corpus, "corpus.mlct"))?;
            let samples_path = path(samples, "samples.mlct");
            let samples = Corpus::read(&samples_path)?;
            let prov = read_provenance(&samples_path)?;
            let nfe: usize = prov
                .get("nfe")
                .and_then(|v| v.parse().ok())
                .with_context(|| format!("{} lacks an nfe entry", provenance_path(&samples_path).display()))?;
            let (_, held_out) = corpus.split();
            let metrics = score(&samples, &held_out, nfe, cfg.seed)?;
            let lines: String = metrics
                .records(cfg.seed, &cfg.hash())
                .iter()
                .map(|r| r.to_line() + "\n")
                .collect();
            let out = path(out, "metrics.jsonl");
            write_file(&out, lines.as_bytes())?;
            print!("{lines}");
        }
        Command::Ablate { axis, values, out } => {
            let lines = ablate(&cfg, *axis, values)?;
            let out = path(out, &format!("ablate-{}.jsonl", axis.key()));
            write_file(&out, lines.as_bytes())?;
            print!("{lines}");
        }
    }
    Ok(())
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(p)?;
    fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))
}

fn provenance_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".prov");
    PathBuf::from(s)
}

fn run_fields(cfg: &RunConfig) -> [(&'static str, String); 3] {
    [
        ("config_hash", cfg.hash()),
        ("seed", cfg.seed.to_string()),
        ("version", ENGINE_VERSION.to_string()),
    ]
}

/// Sidecar for containers without a metadata section.
fn write_provenance(p: &Path, cfg: &RunConfig, extra: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in run_fields(cfg).iter().map(|(k, v)| (*k, v)).chain(extra.iter().map(|(k, v)| (*k, v))) {
        text += &format!("{k}={v}\n");
    }
    write_file(&provenance_path(p), text.as_bytes())
}

fn read_provenance(p: &Path) -> Result<BTreeMap<String, String>> {
    let prov = provenance_path(p);
    if !prov.exists() {
        return Err(Error::MissingArtifact(prov).into());
    }
    Ok(fs::read_to_string(&prov)?
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn save_checkpoint(p: &Path, mut ckpt: Checkpoint, cfg: &RunConfig, kind: &str) -> Result<()> {
    for (k, v) in run_fields(cfg) {
        ckpt.set_meta(format!("run.{k}"), v);
    }
    ckpt.set_meta("run.kind", kind);
    ensure_parent(p)?;
    ckpt.write(p).with_context(|| format!("writing {}", p.display()))?;
    eprintln!("wrote {}", p.display());
    Ok(())
}

/// Reads a checkpoint, rejecting other engine versions and, when `kind` is
/// non-empty, other artifact kinds.
fn load_checkpoint(p: &Path, kind: &str) -> Result<Checkpoint> {
    let ckpt = Checkpoint::read(p)?;
    match ckpt.meta("run.version") {
        Some(v) if v == ENGINE_VERSION => {}
        found => bail!(
            "{} was written by engine version {:?}, expected {ENGINE_VERSION}",
            p.display(),
            found.unwrap_or("unknown")
        ),
    }
    if !kind.is_empty() && ckpt.meta("run.kind") != Some(kind) {
        bail!("{} is not a {kind} checkpoint", p.display());
    }
    Ok(ckpt)
}

fn load_codec(p: &Path) -> Result<Codec> {
    Ok(Codec::read_from(&load_checkpoint(p, "codec")?)?)
}

fn training_data(cfg: &RunConfig, corpus: &Corpus, codec: &Codec) -> Result<mlct_core::trainer::TrainingSet> {
    let (train_items, _) = corpus.split();
    Ok(pipeline::training_set(codec, &pipeline::vocabulary(cfg), &train_items)?)
}

/// Metrics of a sample file; sample `i` belongs to held-out caption `i % n`.
fn score(samples: &Corpus, held_out: &[MotionSequence], nfe: usize, seed: u64) -> Result<pipeline::Metrics> {
    let n = held_out.len();
    if n == 0 {
        bail!("corpus has no held-out items");
    }
    let generated = Generated {
        labels: samples.items.iter().map(|m| m.label).collect(),
        group: samples.items.iter().map(|m| m.id as usize % n).collect(),
        latents: Array2::zeros((0, 0)),
        motions: samples.items.iter().map(|m| m.data.clone()).collect(),
        evaluations: nfe,
    };
    Ok(pipeline::evaluate(&generated, &Reference::new(held_out)?, seed)?)
}

fn ablate(base: &RunConfig, axis: Axis, values: &[String]) -> Result<String> {
    let mut out = String::new();
    let mut shared = None;
    for raw in values {
        let mut cfg = base.clone();
        cfg.set(axis.key(), &axis.config_value(raw))?;
        cfg.validate()?;
        eprintln!("{} = {raw}", axis.key());
        let prepared = if axis.touches_codec() {
            pipeline::prepare(&cfg)?
        } else {
            match &shared {
                Some(p) => p,
                None => shared.insert(pipeline::prepare(&cfg)?),
            }
            .clone()
        };
        let dict = pipeline::fit_dictionary(&cfg, &prepared.data)?;
        let (trainer, _) = pipeline::fit_consistency(&cfg, &prepared.data, dict)?;
        let model = ConsistencyModel::from_trainer(&trainer)?;
        let reqs = Requests::from_items(&prepared.vocab, &prepared.held_out, cfg.sample_repeats)?;
        let options = SampleOptions {
            nfe: cfg.nfe,
            seed: mlct_core::rng::sub_seed(cfg.seed, "sampling"),
            reuse_noise: cfg.reuse_noise,
        };
        let generated = pipeline::generate_consistency(&model, &prepared.codec, &reqs, options)?;
        let m = pipeline::evaluate(&generated, &Reference::new(&prepared.held_out)?, cfg.seed)?;
        out += &ablation_line(axis, raw, &m, &cfg);
        out.push('\n');
    }
    Ok(out)
}

fn ablation_line(axis: Axis, value: &str, m: &pipeline::Metrics, cfg: &RunConfig) -> String {
    let num = |v: f64| if v.is_finite() { serde_json::json!(v) } else { serde_json::Value::Null };
    serde_json::json!({
        "axis": axis.key(),
        "value": value,
        "frechet_analogue": num(m.frechet),
        "condition_accuracy": num(m.accuracy),
        "diversity": num(m.diversity),
        "multimodality": num(m.multimodality),
        "nfe": m.nfe,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
    })
    .to_string()
}

fn loss_plot(rows: &[LogRow]) -> String {
    let series = |name: &str, f: fn(&LogRow) -> f64| Series {
        name: name.into(),
        points: rows.iter().map(|r| (r.step as f64, f(r))).collect(),
    };
    line_chart(
        "consistency training",
        &[
            series("consistency", |r| r.losses.consistency),
            series("uncond", |r| r.losses.uncond),
        ],
    )
}

/// Channel 0 of the first sample of up to four classes.
fn trajectory_plot(g: &Generated) -> String {
    let mut seen = Vec::new();
    let mut series = Vec::new();
    for (label, m) in g.labels.iter().zip(&g.motions) {
        if seen.contains(label) || seen.len() == 4 {
            continue;
        }
        seen.push(*label);
        series.push(Series {
            name: format!("class {label}"),
            points: m.column(0).iter().enumerate().map(|(i, &v)| (i as f64, v)).collect(),
        });
    }
    line_chart("decoded trajectories, channel 0", &series)
}
