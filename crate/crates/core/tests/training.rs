//! Measurements on trained toy models: codec quality, loss trends and sampler accuracy.

#![allow(clippy::field_reassign_with_default)]

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlct_core::codec::{train_codec, window_means, CodecConfig, CodecTrainConfig, LatentMode};
use mlct_core::config::RunConfig;
use mlct_core::corpus::{class_families, draw_style, render, MotionSequence};
use mlct_core::eval::{condition_accuracy, summary_features};
use mlct_core::netcore::backbone::ConditionEmbedding;
use mlct_core::pipeline::{self, Reference};
use mlct_core::sampler::{ConsistencyModel, SampleOptions};
use mlct_core::trainer::train;

fn two_class() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.classes = 2;
    cfg.items_per_class = 200;
    cfg.seed = 3;
    cfg
}

fn smooth_l1(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum::<f64>()
        / n
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn two_class_pipeline_measurements() {
    let cfg = two_class();
    let prep = pipeline::prepare(&cfg).unwrap();

    // codec loss trend in 100-step windows; small upticks within 5% are minibatch noise
    let windows = window_means(&prep.codec_losses, 100);
    assert!(windows.len() >= 10);
    for w in windows.windows(2) {
        assert!(w[1] <= 1.05 * w[0], "codec window mean rose: {:?}", windows);
    }
    assert!(windows[windows.len() - 1] < 0.2 * windows[0]);

    // held-out reconstruction
    let errs: Vec<f64> = prep
        .held_out
        .iter()
        .map(|m| smooth_l1(&prep.codec.reconstruct(&m.data, Some(LatentMode::Quantized)).unwrap(), &m.data))
        .collect();
    let mean_err = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!(mean_err < 0.01, "held-out per-frame smooth-L1 {mean_err}");

    // latents of one trajectory rendered at F and 2F frames sit closer than other classes
    let families = class_families(cfg.classes, cfg.channels, mlct_core::rng::sub_seed(cfg.seed, "check"));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let style = draw_style(cfg.channels, &mut rng);
        let short = prep.codec.encode(&render(&families[0], &style, 32)).unwrap();
        let long = prep.codec.encode(&render(&families[0], &style, 64)).unwrap();
        let other = prep.codec.encode(&render(&families[1], &style, 32)).unwrap();
        let (s, l, o) = (short.row(0).to_vec(), long.row(0).to_vec(), other.row(0).to_vec());
        assert!(dist(&s, &l) < dist(&s, &o), "{} vs {}", dist(&s, &l), dist(&s, &o));
    }

    // real held-out data is separable by training-set centroids
    let reference = Reference::new(&prep.train_items).unwrap();
    let labelled: Vec<(u16, Vec<f64>)> = prep.held_out.iter().map(|m| (m.label, summary_features(&m.data))).collect();
    let acc = condition_accuracy(&labelled, &reference.centroids).unwrap();
    assert!(acc >= 0.95, "held-out accuracy {acc}");

    // consistency training, 5000 steps
    let mut cfg5 = cfg.clone();
    cfg5.steps = 5000;
    let dict = pipeline::fit_dictionary(&cfg5, &prep.data).unwrap();
    let mut trainer = pipeline::new_consistency_trainer(&cfg5, dict).unwrap();
    let log = train(&mut trainer, &prep.data).unwrap();
    let uncond: Vec<f64> = log.iter().map(|r| r.losses.uncond).collect();
    let initial = uncond[..20].iter().sum::<f64>() / 20.0;
    let u = window_means(&uncond, 500);
    eprintln!("uncond initial {initial:.4}, 500-step windows {u:?}");
    assert!(u[u.len() - 1] < 0.95 * initial, "initial {initial}, windows {u:?}");
    assert!(log.iter().all(|r| r.losses.consistency.is_finite() && r.losses.consistency >= 0.0));

    // 500 samples per class at nfe 4
    let model = ConsistencyModel::from_trainer(&trainer).unwrap();
    let vocab = &prep.vocab;
    let mut conds = Vec::new();
    let mut labels = Vec::new();
    for label in 0..cfg.classes as u16 {
        for _ in 0..500 {
            conds.push(ConditionEmbedding::Text(vocab.class_embedding(label).unwrap()));
            labels.push(label);
        }
    }
    let out = model.sample(&conds, SampleOptions { nfe: 4, seed: 21, reuse_noise: false }).unwrap();
    let motions = prep.codec.decode_batch(&out.latents, &vec![48; conds.len()]).unwrap();
    let samples: Vec<(u16, Vec<f64>)> = labels.iter().copied().zip(motions.iter().map(summary_features)).collect();
    let reference = Reference::new(&prep.held_out).unwrap();
    let acc = condition_accuracy(&samples, &reference.centroids).unwrap();
    assert!(acc >= 0.9, "sampled accuracy {acc}");
}

#[test]
fn single_item_codec_overfits() {
    let families = class_families(1, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let style = draw_style(4, &mut rng);
    let item = MotionSequence::new(0, 0, render(&families[0], &style, 40)).unwrap();
    let config = CodecConfig {
        frames_min: 32,
        frames_max: 64,
        width: 64,
        ..CodecConfig::default()
    };
    let train = CodecTrainConfig {
        steps: 1500,
        batch: 1,
        lr: 3e-3,
        seed: 7,
    };
    let (codec, losses) = train_codec(std::slice::from_ref(&item), config, train).unwrap();
    let recon = codec.reconstruct(&item.data, Some(LatentMode::Quantized)).unwrap();
    let err = smooth_l1(&recon, &item.data);
    assert!(err < 1e-3, "overfit error {err}, last losses {:?}", &losses[losses.len() - 5..]);
}
