use headsplat::assets_io::MotionConfig;
use headsplat::head_model::{synthetic_head, SyntheticHeadConfig};
use headsplat::objectives::LossWeights;
use headsplat_motion::pipeline::{build_translator, speaker_apertures};
use headsplat_motion::*;

fn small() -> MotionConfig {
    MotionConfig {
        clips: 4,
        frames: 30,
        dim: 16,
        hidden: 32,
        pretrain_steps: 200,
        steps: 800,
        ..MotionConfig::default()
    }
}

#[test]
fn louder_speaker_opens_wider() {
    let head = synthetic_head(&SyntheticHeadConfig::default());
    let cfg = small();
    let clips = generate_corpus(&cfg, head.param_dims(), 25.0, 1).unwrap();
    let t = build_translator(&cfg, &LossWeights::default(), &head, &clips, 2).unwrap();
    let h = &t.train.history;
    assert!(h.last().unwrap().rec < 0.1 * h[0].rec);
    let held: Vec<ToyAudio> = generate_corpus(&cfg, head.param_dims(), 25.0, 3)
        .unwrap()
        .into_iter()
        .map(|c| c.audio)
        .collect();
    let a = speaker_apertures(&t.model, &head, &held).unwrap();
    assert!(a[0] > a[1] && a[1] > 0.0, "{a:?}");
    let feats = encode_audio(&held[0], &t.model.featurizer).unwrap();
    let y0 = decode_motion(&feats, 0, &t.model).unwrap();
    let y1 = decode_motion(&feats, 1, &t.model).unwrap();
    let diff = y0
        .frames
        .iter()
        .zip(&y1.frames)
        .flat_map(|(p, q)| p.to_flat().into_iter().zip(q.to_flat()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    assert!(diff > 1e-6);
}

#[test]
fn build_is_deterministic() {
    let head = synthetic_head(&SyntheticHeadConfig::default());
    let cfg = MotionConfig {
        steps: 20,
        pretrain_steps: 20,
        ..small()
    };
    let clips = generate_corpus(&cfg, head.param_dims(), 25.0, 4).unwrap();
    let a = build_translator(&cfg, &LossWeights::default(), &head, &clips, 5).unwrap();
    let b = build_translator(&cfg, &LossWeights::default(), &head, &clips, 5).unwrap();
    assert_eq!(a.model, b.model);
}
