//! Binary assets, images, run configuration and the synthetic benchmark.
//!
//! Binary layouts are described byte by byte in `docs/formats.md`. Every
//! file starts with an 8-byte versioned magic; counts are `u32`, floats are
//! `f32` except in checkpoints, which store `f64` so a resumed fit continues
//! exactly where it stopped.

pub mod codec;
pub mod config;
pub mod dataset;
pub mod image;

use std::fs;
use std::path::Path;

use crate::anchoring::{sh_rest_len, BoundGaussian, GaussianSet, LatentMlp, SpeakerBlendShapes};
use crate::error::{Error, Result};
use crate::fitter::{FitState, Moments, OptimizerState};
use crate::head_model::{AttachmentGroup, HeadModel, JointTemplate, MotionParams, ParamDims};
use codec::{Decoder, Encoder, Width};

pub use config::{CameraConfig, MotionConfig, RunConfig};
pub use dataset::{load_dataset, make_synthetic_dataset, save_dataset, SynthConfig, SyntheticDataset};
pub use image::{decode_image, encode_image, load_image, save_image};

pub const HEAD_MAGIC: &[u8; 8] = b"GTHEAD01";
pub const GAUSSIANS_MAGIC: &[u8; 8] = b"GTGAUS01";
pub const PARAMS_MAGIC: &[u8; 8] = b"GTPARM01";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GTCKPT01";

const NO_PARENT: usize = u32::MAX as usize;
const MAX_SH_DEGREE: usize = 3;

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// `fs::read` with the path in the error message.
pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| with_path(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| with_path(path, e))
}

/// `fs::write` with the path in the error message.
pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| with_path(path, e))
}

fn invalid(field: &str, err: Error) -> Error {
    Error::malformed(field, err.to_string())
}

pub fn encode_head(head: &HeadModel) -> Vec<u8> {
    let mut e = Encoder::new(HEAD_MAGIC, Width::F32);
    e.u32(head.n_vertices());
    e.u32(head.triangles.len());
    e.u32(head.n_shape);
    e.u32(head.n_expr);
    e.u32(head.pose_correctives as usize);
    e.u32(head.n_joints());
    e.u32(head.attachment_groups.len());
    head.v_base.iter().for_each(|v| e.v3(v));
    head.triangles.iter().flatten().for_each(|&i| e.u32(i));
    head.triangle_category.iter().for_each(|&c| e.u32(c as usize));
    head.bs_basis.iter().flatten().for_each(|v| e.v3(v));
    e.fs(&head.skin_weights);
    head.joints.rest.iter().for_each(|v| e.v3(v));
    head.joints.parents.iter().for_each(|p| e.u32(p.unwrap_or(NO_PARENT)));
    for g in &head.attachment_groups {
        e.u32(g.attached.len());
        e.u32(g.sources.len());
        g.attached.iter().for_each(|&i| e.u32(i));
        g.sources.iter().for_each(|&i| e.u32(i));
    }
    e.buf
}

pub fn decode_head(bytes: &[u8]) -> Result<HeadModel> {
    let mut d = Decoder::new(bytes, HEAD_MAGIC, Width::F32)?;
    let fsz = d.float_size();
    let nv = d.u32("n_vertices")?;
    if nv == 0 {
        return Err(Error::malformed("n_vertices", "a head needs vertices"));
    }
    let nt = d.u32("n_triangles")?;
    let n_shape = d.u32("n_shape")?;
    let n_expr = d.u32("n_expr")?;
    let pose_correctives = match d.u32("pose_correctives")? {
        0 => false,
        1 => true,
        x => return Err(Error::malformed("pose_correctives", format!("expected 0 or 1, found {x}"))),
    };
    let nj = d.u32("n_joints")?;
    let ng = d.u32("n_attachment_groups")?;
    let v_base = d.v3s("vertices", nv)?;
    let flat = d.u32s("triangles", nt.saturating_mul(3))?;
    let triangles = flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let triangle_category = d.u32s("triangle_category", nt)?.into_iter().map(|c| c as u32).collect();
    let n_basis = n_shape
        .checked_add(n_expr)
        .and_then(|n| n.checked_add(if pose_correctives { 3 * nj } else { 0 }))
        .ok_or_else(|| Error::malformed("bs_basis", "basis count overflows"))?;
    d.count_fits("bs_basis", n_basis, nv.saturating_mul(3 * fsz))?;
    let bs_basis = (0..n_basis).map(|_| d.v3s("bs_basis", nv)).collect::<Result<Vec<_>>>()?;
    let skin_weights = d.fs("skin_weights", nv.saturating_mul(nj))?;
    let rest = d.v3s("joint_rest", nj)?;
    let parents = d
        .u32s("joint_parents", nj)?
        .into_iter()
        .map(|p| (p != NO_PARENT).then_some(p))
        .collect();
    let mut attachment_groups = Vec::new();
    for _ in 0..ng {
        let na = d.u32("attachment_attached")?;
        let ns = d.u32("attachment_sources")?;
        attachment_groups.push(AttachmentGroup {
            attached: d.u32s("attachment_attached", na)?,
            sources: d.u32s("attachment_sources", ns)?,
        });
    }
    d.finish()?;
    let head = HeadModel {
        v_base,
        triangles,
        n_shape,
        n_expr,
        pose_correctives,
        bs_basis,
        skin_weights,
        joints: JointTemplate { rest, parents },
        triangle_category,
        attachment_groups,
    };
    head.validate().map_err(|e| invalid("head", e))?;
    Ok(head)
}

pub fn save_head(path: &Path, head: &HeadModel) -> Result<()> {
    write(path, &encode_head(head))
}

pub fn load_head(path: &Path) -> Result<HeadModel> {
    decode_head(&read(path)?)
}

fn put_gaussians(e: &mut Encoder, set: &GaussianSet) {
    let mlp = &set.banks.mlp;
    e.u32(set.len());
    e.u32(set.sh_degree as usize);
    e.u32(mlp.psi_dim);
    e.u32(mlp.hidden);
    e.u32(mlp.latent);
    for g in &set.gaussians {
        e.u32(g.parent);
        e.v3(&g.u_local);
        e.m3(&g.r_local);
        e.v3(&g.s_local);
        e.f(g.alpha);
        e.v3(&g.kappa0);
        g.kappa_rest.iter().for_each(|k| e.v3(k));
        e.fs(&g.eta_logits);
    }
    e.fs(&mlp.w1);
    e.fs(&mlp.b1);
    e.fs(&mlp.w2);
    e.fs(&mlp.b2);
    e.fs(&set.banks.w_pos);
    e.fs(&set.banks.w_rot);
    e.fs(&set.banks.w_color);
}

fn get_gaussians(d: &mut Decoder) -> Result<GaussianSet> {
    let n = d.u32("n_gaussians")?;
    let sh_degree = d.u32("sh_degree")?;
    if sh_degree > MAX_SH_DEGREE {
        return Err(Error::malformed("sh_degree", format!("{sh_degree} exceeds {MAX_SH_DEGREE}")));
    }
    let psi_dim = d.u32("psi_dim")?;
    let hidden = d.u32("hidden")?;
    let latent = d.u32("latent")?;
    let rest = sh_rest_len(sh_degree as u32);
    let mut gaussians = Vec::new();
    for _ in 0..n {
        let parent = d.u32("parent")?;
        let u_local = d.v3("u_local")?;
        let r_local = d.m3("r_local")?;
        let s_local = d.v3("s_local")?;
        if s_local.iter().any(|&s| s <= 0.0) {
            return Err(Error::malformed("s_local", "scales must be positive"));
        }
        let alpha = d.f("alpha")?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::malformed("alpha", format!("{alpha} outside [0, 1]")));
        }
        let kappa0 = d.v3("kappa0")?;
        let kappa_rest = d.v3s("kappa_rest", rest)?;
        let e = d.fs("eta_logits", 3)?;
        gaussians.push(BoundGaussian {
            u_local,
            r_local,
            s_local,
            alpha,
            kappa0,
            kappa_rest,
            parent,
            eta_logits: [e[0], e[1], e[2]],
        });
    }
    let size = |a: usize, b: usize, field: &str| {
        a.checked_mul(b).ok_or_else(|| Error::malformed(field, "size overflows"))
    };
    let mlp = LatentMlp {
        psi_dim,
        hidden,
        latent,
        w1: d.fs("mlp_w1", size(hidden, psi_dim, "mlp_w1")?)?,
        b1: d.fs("mlp_b1", hidden)?,
        w2: d.fs("mlp_w2", size(latent, hidden, "mlp_w2")?)?,
        b2: d.fs("mlp_b2", latent)?,
    };
    let row = size(n, size(latent, 3, "banks")?, "banks")?;
    let banks = SpeakerBlendShapes {
        mlp,
        w_pos: d.fs("w_pos", row)?,
        w_rot: d.fs("w_rot", row)?,
        w_color: d.fs("w_color", row)?,
    };
    Ok(GaussianSet {
        sh_degree: sh_degree as u32,
        gaussians,
        banks,
    })
}

pub fn encode_gaussians(set: &GaussianSet) -> Vec<u8> {
    let mut e = Encoder::new(GAUSSIANS_MAGIC, Width::F32);
    put_gaussians(&mut e, set);
    e.buf
}

pub fn decode_gaussians(bytes: &[u8]) -> Result<GaussianSet> {
    let mut d = Decoder::new(bytes, GAUSSIANS_MAGIC, Width::F32)?;
    let set = get_gaussians(&mut d)?;
    d.finish()?;
    Ok(set)
}

pub fn save_gaussians(path: &Path, set: &GaussianSet) -> Result<()> {
    write(path, &encode_gaussians(set))
}

pub fn load_gaussians(path: &Path) -> Result<GaussianSet> {
    decode_gaussians(&read(path)?)
}

/// Rounds every stored value of a set to `f32` so the asset round-trips.
pub fn quantize_gaussians(set: &GaussianSet) -> GaussianSet {
    decode_gaussians(&encode_gaussians(set)).expect("re-decoding a freshly encoded set")
}

/// A motion sequence `Ŷ_{1:T}` together with its frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSequence {
    pub dims: ParamDims,
    pub frame_rate: f64,
    pub frames: Vec<MotionParams>,
}

impl ParamSequence {
    pub fn new(dims: ParamDims, frame_rate: f64, frames: Vec<MotionParams>) -> Result<Self> {
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("frame rate {frame_rate} must be positive")));
        }
        for f in &frames {
            if f.dims() != dims {
                return Err(Error::DimensionMismatch {
                    what: "frame parameters",
                    expected: dims.total(),
                    got: f.dims().total(),
                });
            }
        }
        Ok(ParamSequence {
            dims,
            frame_rate,
            frames,
        })
    }
}

fn put_frames(e: &mut Encoder, dims: ParamDims, frames: &[MotionParams]) {
    e.u32(dims.shape);
    e.u32(dims.expr);
    e.u32(dims.pose);
    e.u32(frames.len());
    frames.iter().for_each(|f| e.fs(&f.to_flat()));
}

fn get_frames(d: &mut Decoder) -> Result<(ParamDims, Vec<MotionParams>)> {
    let dims = ParamDims {
        shape: d.u32("n_shape")?,
        expr: d.u32("n_expr")?,
        pose: d.u32("n_pose")?,
    };
    if dims.shape.checked_add(dims.expr).and_then(|n| n.checked_add(dims.pose)).is_none() {
        return Err(Error::malformed("n_pose", "dimension overflows"));
    }
    let t = d.u32("n_frames")?;
    if t > 0 && dims.total() == 0 {
        return Err(Error::malformed("n_frames", "frames without parameters"));
    }
    let frames = (0..t)
        .map(|_| {
            let flat = d.fs("frames", dims.total())?;
            MotionParams::from_flat(dims, &flat)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dims, frames))
}

pub fn encode_params(seq: &ParamSequence) -> Vec<u8> {
    let mut e = Encoder::new(PARAMS_MAGIC, Width::F32);
    e.f(seq.frame_rate);
    put_frames(&mut e, seq.dims, &seq.frames);
    e.buf
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSequence> {
    let mut d = Decoder::new(bytes, PARAMS_MAGIC, Width::F32)?;
    let frame_rate = d.f("frame_rate")?;
    if frame_rate <= 0.0 {
        return Err(Error::malformed("frame_rate", format!("{frame_rate} must be positive")));
    }
    let (dims, frames) = get_frames(&mut d)?;
    d.finish()?;
    Ok(ParamSequence {
        dims,
        frame_rate,
        frames,
    })
}

pub fn save_params(path: &Path, seq: &ParamSequence) -> Result<()> {
    write(path, &encode_params(seq))
}

pub fn load_params(path: &Path) -> Result<ParamSequence> {
    decode_params(&read(path)?)
}

fn optimizer_groups(o: &OptimizerState) -> [&Moments; 12] {
    [
        &o.position,
        &o.rotation,
        &o.scale,
        &o.opacity,
        &o.kappa0,
        &o.kappa_rest,
        &o.eta_logits,
        &o.w_pos,
        &o.w_rot,
        &o.w_color,
        &o.mlp,
        &o.flame,
    ]
}

const MOMENT_FIELDS: [&str; 12] = [
    "moments_position",
    "moments_rotation",
    "moments_scale",
    "moments_opacity",
    "moments_kappa0",
    "moments_kappa_rest",
    "moments_eta_logits",
    "moments_w_pos",
    "moments_w_rot",
    "moments_w_color",
    "moments_mlp",
    "moments_flame",
];

pub fn encode_checkpoint(state: &FitState) -> Vec<u8> {
    let mut e = Encoder::new(CHECKPOINT_MAGIC, Width::F64);
    put_gaussians(&mut e, &state.set);
    let dims = state.frame_params.first().map(|f| f.dims()).unwrap_or(ParamDims {
        shape: 0,
        expr: 0,
        pose: 0,
    });
    put_frames(&mut e, dims, &state.frame_params);
    e.u32(state.iteration);
    e.u32(state.optimizer.step as usize);
    for m in optimizer_groups(&state.optimizer) {
        e.u32(m.m.len());
        e.fs(&m.m);
        e.fs(&m.v);
    }
    e.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<FitState> {
    let mut d = Decoder::new(bytes, CHECKPOINT_MAGIC, Width::F64)?;
    let set = get_gaussians(&mut d)?;
    let (_, frame_params) = get_frames(&mut d)?;
    let iteration = d.u32("iteration")?;
    let step = d.u32("step")?;
    let mut optimizer = OptimizerState::new(&set, &frame_params);
    optimizer.step = step as u64;
    let groups = [
        &mut optimizer.position,
        &mut optimizer.rotation,
        &mut optimizer.scale,
        &mut optimizer.opacity,
        &mut optimizer.kappa0,
        &mut optimizer.kappa_rest,
        &mut optimizer.eta_logits,
        &mut optimizer.w_pos,
        &mut optimizer.w_rot,
        &mut optimizer.w_color,
        &mut optimizer.mlp,
        &mut optimizer.flame,
    ];
    for (m, field) in groups.into_iter().zip(MOMENT_FIELDS) {
        let n = d.u32(field)?;
        if n != m.m.len() {
            return Err(Error::malformed(
                field,
                format!("expected {} entries for this set, found {n}", m.m.len()),
            ));
        }
        m.m = d.fs(field, n)?;
        m.v = d.fs(field, n)?;
        if m.v.iter().any(|&v| v < 0.0) {
            return Err(Error::malformed(field, "negative second moment"));
        }
    }
    d.finish()?;
    Ok(FitState {
        set,
        frame_params,
        optimizer,
        iteration,
    })
}

pub fn save_checkpoint(path: &Path, state: &FitState) -> Result<()> {
    write(path, &encode_checkpoint(state))
}

pub fn load_checkpoint(path: &Path) -> Result<FitState> {
    decode_checkpoint(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head_model::{synthetic_head, SyntheticHeadConfig};
    use crate::math::Vec3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f32r(x: f64) -> f64 {
        x as f32 as f64
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, sh_degree: u32) -> GaussianSet {
        let v = |rng: &mut ChaCha8Rng| Vec3::new(f32r(rng.random()), f32r(rng.random()), f32r(rng.random()));
        let gaussians = (0..n)
            .map(|i| BoundGaussian {
                u_local: v(rng),
                r_local: crate::math::Mat3::from_fn(|_, _| f32r(rng.random_range(-1.0..1.0))),
                s_local: v(rng).map(|s| f32r(s + 0.5)),
                alpha: f32r(rng.random()),
                kappa0: v(rng),
                kappa_rest: (0..sh_rest_len(sh_degree)).map(|_| v(rng)).collect(),
                parent: i % 7,
                eta_logits: [f32r(rng.random()), f32r(rng.random()), f32r(rng.random())],
            })
            .collect();
        let mut mlp = LatentMlp::random(3, 4, 2, rng);
        for w in mlp.w1.iter_mut().chain(mlp.w2.iter_mut()) {
            *w = f32r(*w);
        }
        let mut banks = SpeakerBlendShapes::zeros(mlp, n);
        for w in banks.w_pos.iter_mut().chain(banks.w_rot.iter_mut()).chain(banks.w_color.iter_mut()) {
            *w = f32r(rng.random_range(-1.0..1.0));
        }
        GaussianSet {
            sh_degree,
            gaussians,
            banks,
        }
    }

    fn random_params(rng: &mut ChaCha8Rng, t: usize) -> ParamSequence {
        let dims = ParamDims {
            shape: rng.random_range(1..4),
            expr: rng.random_range(0..5),
            pose: 3 * rng.random_range(0..3),
        };
        let frames = (0..t)
            .map(|_| {
                let flat: Vec<f64> = (0..dims.total()).map(|_| f32r(rng.random_range(-2.0..2.0))).collect();
                MotionParams::from_flat(dims, &flat).unwrap()
            })
            .collect();
        ParamSequence::new(dims, f32r(rng.random_range(1.0..60.0)), frames).unwrap()
    }

    #[test]
    fn head_round_trip_is_byte_identical() {
        let head = synthetic_head(&SyntheticHeadConfig::default());
        let bytes = encode_head(&head);
        let back = decode_head(&bytes).unwrap();
        assert_eq!(back, head);
        assert_eq!(encode_head(&back), bytes);
    }

    #[test]
    fn head_round_trip_with_pose_correctives() {
        let head = synthetic_head(&SyntheticHeadConfig {
            pose_correctives: true,
            ..Default::default()
        });
        assert_eq!(decode_head(&encode_head(&head)).unwrap(), head);
    }

    #[test]
    fn truncated_vertex_block_names_vertices() {
        let head = synthetic_head(&SyntheticHeadConfig::default());
        let bytes = encode_head(&head);
        let end_of_vertices = 8 + 7 * 4 + head.n_vertices() * 12;
        let err = decode_head(&bytes[..end_of_vertices - 1]).unwrap_err();
        match err {
            Error::Malformed { field, .. } => assert_eq!(field, "vertices"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let head = synthetic_head(&SyntheticHeadConfig::default());
        let mut bytes = encode_head(&head);
        bytes.push(0);
        assert!(matches!(decode_head(&bytes), Err(Error::Malformed { field, .. }) if field == "trailer"));
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = random_set(&mut rng, 5, 1);
        let params = random_params(&mut rng, 3);
        let mut state = FitState::new(set, params.frames);
        state.iteration = 17;
        state.optimizer.step = 17;
        state.set.gaussians[0].u_local.x = 0.1 + 1e-12;
        for m in [&mut state.optimizer.position, &mut state.optimizer.flame, &mut state.optimizer.mlp] {
            m.m.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
            m.v.iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
        }
        let bytes = encode_checkpoint(&state);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn bad_alpha_names_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set = random_set(&mut rng, 2, 0);
        set.gaussians[1].alpha = 1.5;
        let err = decode_gaussians(&encode_gaussians(&set)).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
    }

    #[test]
    fn params_rejects_zero_frame_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seq = random_params(&mut rng, 2);
        seq.frame_rate = 0.0;
        let err = decode_params(&encode_params(&seq)).unwrap_err();
        assert!(err.to_string().contains("frame_rate"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn gaussians_round_trip(seed in any::<u64>(), n in 0usize..20, deg in 0u32..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = random_set(&mut rng, n, deg);
            let bytes = encode_gaussians(&set);
            let back = decode_gaussians(&bytes).unwrap();
            prop_assert_eq!(&back, &set);
            prop_assert_eq!(encode_gaussians(&back), bytes);
        }

        #[test]
        fn params_round_trip(seed in any::<u64>(), t in 0usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = random_params(&mut rng, t);
            let bytes = encode_params(&seq);
            let back = decode_params(&bytes).unwrap();
            prop_assert_eq!(&back, &seq);
            prop_assert_eq!(encode_params(&back), bytes);
        }

        #[test]
        fn head_round_trip(seed in any::<u64>(), rings in 3usize..8, segments in 3usize..9) {
            let head = synthetic_head(&SyntheticHeadConfig { rings, segments, seed, ..Default::default() });
            let bytes = encode_head(&head);
            prop_assert_eq!(encode_head(&decode_head(&bytes).unwrap()), bytes);
        }
    }

    fn mutate(rng: &mut ChaCha8Rng, bytes: &[u8]) -> Vec<u8> {
        let mut b = bytes.to_vec();
        match rng.random_range(0..4) {
            0 => {
                let len = rng.random_range(0..=b.len());
                b.truncate(len);
            }
            1 => {
                for _ in 0..rng.random_range(1..8) {
                    if !b.is_empty() {
                        let i = rng.random_range(0..b.len());
                        b[i] = rng.random();
                    }
                }
            }
            2 => {
                if b.len() > 8 {
                    let i = rng.random_range(8..b.len());
                    let bit = rng.random_range(0..8);
                    b[i] ^= 1 << bit;
                }
            }
            _ => {
                let i = rng.random_range(0..=b.len());
                let extra: Vec<u8> = (0..rng.random_range(1..16)).map(|_| rng.random()).collect();
                b.splice(i..i, extra);
            }
        }
        b
    }

    #[test]
    fn fuzzed_loaders_return_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let head = encode_head(&synthetic_head(&SyntheticHeadConfig {
            rings: 4,
            segments: 5,
            ..Default::default()
        }));
        let set = random_set(&mut rng, 4, 1);
        let gaus = encode_gaussians(&set);
        let params_seq = random_params(&mut rng, 4);
        let params = encode_params(&params_seq);
        let ckpt = encode_checkpoint(&FitState::new(set, params_seq.frames));
        for _ in 0..1000 {
            let _ = decode_head(&mutate(&mut rng, &head));
            let _ = decode_gaussians(&mutate(&mut rng, &gaus));
            let _ = decode_params(&mutate(&mut rng, &params));
            let _ = decode_checkpoint(&mutate(&mut rng, &ckpt));
        }
    }
}
