//! Binary corpus (`GTCORP01`, f32) and translator checkpoint (`GTMOTN01`,
//! f64) files. Layouts are listed in `docs/formats.md`.

use std::path::Path;

use headsplat::assets_io::codec::{Decoder, Encoder, Width};
use headsplat::assets_io::{read, write, ParamSequence};
use headsplat::head_model::{MotionParams, ParamDims};
use headsplat::{Error, Result};

use crate::audio::{Featurizer, ToyAudio};
use crate::corpus::Clip;
use crate::model::{MotionDecoder, TranslatorModel};

pub const CORPUS_MAGIC: &[u8; 8] = b"GTCORP01";
pub const TRANSLATOR_MAGIC: &[u8; 8] = b"GTMOTN01";

fn put_dims(e: &mut Encoder, dims: ParamDims) {
    e.u32(dims.shape);
    e.u32(dims.expr);
    e.u32(dims.pose);
}

fn get_dims(d: &mut Decoder) -> Result<ParamDims> {
    let dims = ParamDims {
        shape: d.u32("n_shape")?,
        expr: d.u32("n_expr")?,
        pose: d.u32("n_pose")?,
    };
    if dims.total() == 0 {
        return Err(Error::malformed("n_pose", "motion has no parameters"));
    }
    Ok(dims)
}

fn frame_rate(d: &mut Decoder) -> Result<f64> {
    let r = d.f("frame_rate")?;
    if r > 0.0 {
        Ok(r)
    } else {
        Err(Error::malformed("frame_rate", format!("{r} is not positive")))
    }
}

/// All clips must share one parameter layout and frame rate.
pub fn encode_corpus(clips: &[Clip]) -> Result<Vec<u8>> {
    let first = clips.first().ok_or_else(|| Error::InvalidArgument("empty corpus".into()))?;
    let (dims, rate) = (first.motion.dims, first.motion.frame_rate);
    let mut e = Encoder::new(CORPUS_MAGIC, Width::F32);
    put_dims(&mut e, dims);
    e.f(rate);
    e.u32(clips.len());
    for c in clips {
        if c.motion.dims != dims || c.motion.frame_rate != rate {
            return Err(Error::InvalidArgument("clips differ in parameter layout or frame rate".into()));
        }
        Error::check_dim("clip frames", c.audio.len(), c.motion.frames.len())?;
        e.u32(c.speaker);
        e.u32(c.audio.timbre);
        e.u32(c.audio.len());
        c.audio.tokens.iter().for_each(|&t| e.u32(t));
        c.motion.frames.iter().for_each(|f| e.fs(&f.to_flat()));
    }
    Ok(e.buf)
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Vec<Clip>> {
    let mut d = Decoder::new(bytes, CORPUS_MAGIC, Width::F32)?;
    let dims = get_dims(&mut d)?;
    let rate = frame_rate(&mut d)?;
    let n = d.u32("n_clips")?;
    d.count_fits("clips", n, 12)?;
    let mut clips = Vec::with_capacity(n);
    for _ in 0..n {
        let speaker = d.u32("speaker")?;
        let timbre = d.u32("timbre")?;
        let t = d.u32("n_frames")?;
        let tokens = d.u32s("tokens", t)?;
        d.count_fits("frames", t, dims.total() * d.float_size())?;
        let frames = (0..t)
            .map(|_| MotionParams::from_flat(dims, &d.fs("frames", dims.total())?))
            .collect::<Result<Vec<_>>>()?;
        clips.push(Clip {
            audio: ToyAudio { tokens, timbre },
            speaker,
            motion: ParamSequence::new(dims, rate, frames)?,
        });
    }
    d.finish()?;
    Ok(clips)
}

pub fn save_corpus(path: &Path, clips: &[Clip]) -> Result<()> {
    write(path, &encode_corpus(clips)?)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Clip>> {
    decode_corpus(&read(path)?)
}

pub fn encode_translator(m: &TranslatorModel) -> Result<Vec<u8>> {
    m.validate()?;
    let mut e = Encoder::new(TRANSLATOR_MAGIC, Width::F64);
    put_dims(&mut e, m.dims);
    e.f(m.frame_rate);
    let dec = &m.decoder;
    e.u32(dec.dim);
    e.u32(dec.heads);
    e.u32(dec.hidden);
    e.u32(m.featurizer.vocab());
    e.u32(m.featurizer.timbres());
    e.u32(m.speakers());
    e.fs(&m.featurizer.content);
    e.fs(&m.featurizer.timbre);
    e.fs(&m.identity);
    dec.tensors().iter().for_each(|t| e.fs(t));
    Ok(e.buf)
}

pub fn decode_translator(bytes: &[u8]) -> Result<TranslatorModel> {
    let mut d = Decoder::new(bytes, TRANSLATOR_MAGIC, Width::F64)?;
    let dims = get_dims(&mut d)?;
    let rate = frame_rate(&mut d)?;
    let dim = d.u32("dim")?;
    let heads = d.u32("heads")?;
    let hidden = d.u32("hidden")?;
    if dim == 0 || heads == 0 || dim % heads != 0 {
        return Err(Error::malformed("heads", format!("dim {dim} is not a positive multiple of {heads} heads")));
    }
    let vocab = d.u32("vocab")?;
    let timbres = d.u32("timbres")?;
    let speakers = d.u32("speakers")?;
    let mut read = |field: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
        let n = rows.checked_mul(cols).ok_or_else(|| Error::malformed(field, "size overflows"))?;
        d.fs(field, n)
    };
    let content = read("content", vocab, dim)?;
    let timbre = read("timbre", timbres, dim)?;
    let identity = read("identity", speakers, dim)?;
    let out = dims.total();
    let mut dec = MotionDecoder::zeros(0, heads, 0, 0);
    dec.dim = dim;
    dec.hidden = hidden;
    dec.out = out;
    let shapes = [
        ("wq", dim, dim),
        ("wk", dim, dim),
        ("wv", dim, dim),
        ("wo", dim, dim),
        ("w1", hidden, dim),
        ("b1", hidden, 1),
        ("w2", out, hidden),
        ("b2", out, 1),
    ];
    for (t, (field, r, c)) in dec.tensors_mut().into_iter().zip(shapes) {
        *t = read(field, r, c)?;
    }
    d.finish()?;
    let model = TranslatorModel {
        featurizer: Featurizer { dim, content, timbre },
        identity,
        decoder: dec,
        dims,
        frame_rate: rate,
    };
    model.validate().map_err(|e| Error::malformed("translator", e.to_string()))?;
    Ok(model)
}

pub fn save_translator(path: &Path, m: &TranslatorModel) -> Result<()> {
    write(path, &encode_translator(m)?)
}

pub fn load_translator(path: &Path) -> Result<TranslatorModel> {
    decode_translator(&read(path)?)
}
