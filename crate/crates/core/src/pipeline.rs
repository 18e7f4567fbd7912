//! Stage wiring shared by the command line and the end-to-end tests.

use ndarray::Array2;

use crate::clustering::{build_dictionary, ClusterDictionary};
use crate::codec::{train_codec, Codec};
use crate::config::RunConfig;
use crate::corpus::{generate, Corpus, MotionSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{
    condition_accuracy, diversity, frechet_gaussian_distance, multimodality, summary_features, Centroids,
    MetricRecord,
};
use crate::netcore::backbone::ConditionEmbedding;
use crate::oracle::ScoreBaseline;
use crate::rng::sub_seed;
use crate::sampler::{ConsistencyModel, SampleOptions};
use crate::trainer::{train, ConsistencyTrainer, LogRow, TrainingSet};

pub fn generate_corpus(cfg: &RunConfig) -> Result<Corpus> {
    generate(&cfg.corpus_config())
}

pub fn fit_codec(cfg: &RunConfig, train_items: &[MotionSequence]) -> Result<(Codec, Vec<f64>)> {
    train_codec(train_items, cfg.codec_config(), cfg.codec_train_config())
}

pub fn vocabulary(cfg: &RunConfig) -> Vocabulary {
    Vocabulary::new(
        cfg.classes,
        cfg.cond_dim,
        3 * cfg.channels,
        cfg.style_weight,
        sub_seed(cfg.seed, "vocabulary"),
    )
}

/// Frozen latents and condition embeddings of `items`.
pub fn training_set(codec: &Codec, vocab: &Vocabulary, items: &[MotionSequence]) -> Result<TrainingSet> {
    let seqs: Vec<&Array2<f64>> = items.iter().map(|m| &m.data).collect();
    let latents = codec.latents(&seqs)?;
    let embeddings = items.iter().map(|m| vocab.embed(m)).collect::<Result<Vec<_>>>()?;
    TrainingSet::new(latents, embeddings)
}

pub fn fit_dictionary(cfg: &RunConfig, data: &TrainingSet) -> Result<Option<ClusterDictionary>> {
    if !cfg.use_clustering {
        return Ok(None);
    }
    let latents: Vec<Vec<f64>> = data.latents.rows().into_iter().map(|r| r.to_vec()).collect();
    let (dict, _) = build_dictionary(
        &data.embeddings,
        &latents,
        cfg.cluster_count(),
        cfg.tokens,
        sub_seed(cfg.seed, "clustering"),
    )?;
    Ok(Some(dict))
}

pub fn new_consistency_trainer(cfg: &RunConfig, dict: Option<ClusterDictionary>) -> Result<ConsistencyTrainer> {
    ConsistencyTrainer::new(
        cfg.backbone_config(),
        cfg.train_config(),
        cfg.schedule()?,
        cfg.grid()?,
        dict,
        sub_seed(cfg.seed, "init"),
    )
}

pub fn fit_consistency(
    cfg: &RunConfig,
    data: &TrainingSet,
    dict: Option<ClusterDictionary>,
) -> Result<(ConsistencyTrainer, Vec<LogRow>)> {
    let mut trainer = new_consistency_trainer(cfg, dict)?;
    let log = train(&mut trainer, data)?;
    Ok((trainer, log))
}

pub fn fit_baseline(cfg: &RunConfig, data: &TrainingSet) -> Result<(ScoreBaseline, Vec<f64>)> {
    let mut b = ScoreBaseline::new(
        cfg.baseline_backbone(),
        cfg.baseline_config(),
        cfg.schedule()?,
        cfg.grid()?,
        sub_seed(cfg.seed, "baseline-init"),
    )?;
    let losses = b.train(data)?;
    Ok((b, losses))
}

/// What to generate: one entry per requested sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Requests {
    pub labels: Vec<u16>,
    pub conds: Vec<ConditionEmbedding>,
    pub frames: Vec<usize>,
    /// Index of the source condition, shared by repeats.
    pub group: Vec<usize>,
}

impl Requests {
    /// `repeats` samples for each reference item, matching its caption and length.
    pub fn from_items(vocab: &Vocabulary, items: &[MotionSequence], repeats: usize) -> Result<Self> {
        let mut r = Self {
            labels: Vec::new(),
            conds: Vec::new(),
            frames: Vec::new(),
            group: Vec::new(),
        };
        for _ in 0..repeats {
            for (g, item) in items.iter().enumerate() {
                r.labels.push(item.label);
                r.conds.push(ConditionEmbedding::Text(vocab.embed(item)?));
                r.frames.push(item.frames());
                r.group.push(g);
            }
        }
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Decoded samples with their bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub labels: Vec<u16>,
    pub group: Vec<usize>,
    pub latents: Array2<f64>,
    pub motions: Vec<Array2<f64>>,
    /// Network evaluations per trajectory.
    pub evaluations: usize,
}

impl Generated {
    pub fn to_corpus(&self) -> Result<Corpus> {
        let items = self
            .labels
            .iter()
            .zip(&self.motions)
            .enumerate()
            .map(|(i, (&l, m))| MotionSequence::new(i as u32, l, m.mapv(|v| v as f32 as f64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus::new(items))
    }
}

pub fn generate_consistency(
    model: &ConsistencyModel,
    codec: &Codec,
    requests: &Requests,
    options: SampleOptions,
) -> Result<Generated> {
    let out = model.sample(&requests.conds, options)?;
    let motions = codec.decode_batch(&out.latents, &requests.frames)?;
    Ok(Generated {
        labels: requests.labels.clone(),
        group: requests.group.clone(),
        latents: out.latents,
        motions,
        evaluations: out.evaluations,
    })
}

pub fn generate_baseline(
    baseline: &ScoreBaseline,
    codec: &Codec,
    requests: &Requests,
    steps: usize,
    seed: u64,
) -> Result<Generated> {
    let out = baseline.sample(&requests.conds, steps, seed)?;
    let latents = out.denoised.mapv(|v| v.clamp(-1.0, 1.0));
    let motions = codec.decode_batch(&latents, &requests.frames)?;
    Ok(Generated {
        labels: requests.labels.clone(),
        group: requests.group.clone(),
        latents,
        motions,
        evaluations: steps + 1,
    })
}

/// Real reference set for evaluation.
#[derive(Debug, Clone)]
pub struct Reference {
    pub features: Vec<Vec<f64>>,
    pub centroids: Centroids,
}

impl Reference {
    pub fn new(items: &[MotionSequence]) -> Result<Self> {
        let features: Vec<Vec<f64>> = items.iter().map(|m| summary_features(&m.data)).collect();
        let labels: Vec<u16> = items.iter().map(|m| m.label).collect();
        let centroids = Centroids::fit(&features, &labels)?;
        Ok(Self { features, centroids })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub frechet: f64,
    pub ridge_applied: bool,
    pub accuracy: f64,
    pub diversity: f64,
    pub multimodality: f64,
    pub nfe: usize,
}

impl Metrics {
    pub fn records(&self, seed: u64, config_hash: &str) -> Vec<MetricRecord> {
        let rec = |metric: &str, value: f64| MetricRecord {
            metric: metric.to_string(),
            value,
            nfe: Some(self.nfe),
            seed,
            config_hash: config_hash.to_string(),
        };
        vec![
            rec("frechet_analogue", self.frechet),
            rec("condition_accuracy", self.accuracy),
            rec("diversity", self.diversity),
            rec("multimodality", self.multimodality),
        ]
    }
}

pub fn evaluate(generated: &Generated, reference: &Reference, seed: u64) -> Result<Metrics> {
    if generated.motions.is_empty() {
        return Err(Error::Empty("generated samples"));
    }
    let feats: Vec<Vec<f64>> = generated.motions.iter().map(summary_features).collect();
    let fd = frechet_gaussian_distance(&feats, &reference.features)?;
    let labelled: Vec<(u16, Vec<f64>)> = generated.labels.iter().copied().zip(feats.iter().cloned()).collect();
    let accuracy = condition_accuracy(&labelled, &reference.centroids)?;
    let div = diversity(&feats, sub_seed(seed, "diversity"))?;
    let groups_n = generated.group.iter().copied().max().map_or(0, |g| g + 1);
    let mut groups = vec![Vec::new(); groups_n];
    for (g, f) in generated.group.iter().zip(&feats) {
        groups[*g].push(f.clone());
    }
    let mm = if groups.iter().all(|g| g.len() >= 2) {
        multimodality(&groups, sub_seed(seed, "multimodality"))?
    } else {
        f64::NAN
    };
    Ok(Metrics {
        frechet: fd.value,
        ridge_applied: fd.ridge_applied,
        accuracy,
        diversity: div,
        multimodality: mm,
        nfe: generated.evaluations,
    })
}

/// Everything upstream of consistency training for one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub train_items: Vec<MotionSequence>,
    pub held_out: Vec<MotionSequence>,
    pub codec: Codec,
    pub codec_losses: Vec<f64>,
    pub vocab: Vocabulary,
    pub data: TrainingSet,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let corpus = generate_corpus(cfg)?;
    let (train_items, held_out) = corpus.split();
    let (codec, codec_losses) = fit_codec(cfg, &train_items)?;
    let vocab = vocabulary(cfg);
    let data = training_set(&codec, &vocab, &train_items)?;
    Ok(Prepared {
        corpus,
        train_items,
        held_out,
        codec,
        codec_losses,
        vocab,
        data,
    })
}
