//! C ABI over the `seqkd` core: models are opaque handles, every fallible call
//! returns a [`SeqkdStatus`] and leaves a message for [`seqkd_last_error`].
//!
//! Buffers are caller-owned. Functions that fill a buffer take its capacity
//! and report the needed length through an out-parameter; when the capacity is
//! too small they return `SEQKD_STATUS_BUFFER_TOO_SMALL` and write nothing else.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqkd::align::{nw_align, NwScoring, OpKind};
use seqkd::decoding::{beam_search, greedy};
use seqkd::metrics::{bleu, gap_closure, Direction};
use seqkd::model::infer::IncrementalDecoder;
use seqkd::model::{Arch, ModelConfig, Seq2SeqModel};
use seqkd::profiler::theoretical_cost;
use seqkd::tensor::Graph;
use seqkd::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqkdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Shape = 5,
    TokenOutOfRange = 6,
    LengthOverflow = 7,
    Io = 8,
    Parse = 9,
    Checkpoint = 10,
    NonFinite = 11,
    BufferTooSmall = 12,
    Panic = 13,
    Other = 14,
}

/// Opaque model handle.
pub struct SeqkdModel {
    inner: Seq2SeqModel,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqkdOpKind {
    Match = 0,
    Replace = 1,
    Insert = 2,
    Delete = 3,
}

/// One alignment step; absent sides are -1.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqkdAlignOp {
    pub kind: SeqkdOpKind,
    pub teacher_index: i64,
    pub student_index: i64,
    pub is_prefix_match: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SeqkdStatus {
    match e {
        Error::Shape(_) | Error::NonScalarRoot(_) => SeqkdStatus::Shape,
        Error::NonFinite { .. } => SeqkdStatus::NonFinite,
        Error::TokenOutOfRange { .. } => SeqkdStatus::TokenOutOfRange,
        Error::LengthOverflow { .. } => SeqkdStatus::LengthOverflow,
        Error::Config(_) => SeqkdStatus::Config,
        Error::InvalidArgument(_) | Error::UndefinedGap(_) | Error::BudgetTooSmall { .. } => SeqkdStatus::InvalidArgument,
        Error::Parse { .. } | Error::Json(_) => SeqkdStatus::Parse,
        Error::Checkpoint(_) => SeqkdStatus::Checkpoint,
        Error::Io(_) | Error::MissingArtifact(_) => SeqkdStatus::Io,
        _ => SeqkdStatus::Other,
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard<F: FnOnce() -> Result<(), (SeqkdStatus, String)>>(f: F) -> SeqkdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SeqkdStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            SeqkdStatus::Panic
        }
    }
}

type FfiResult<T> = Result<T, (SeqkdStatus, String)>;

fn core<T>(r: seqkd::Result<T>) -> FfiResult<T> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (SeqkdStatus, String) {
    (SeqkdStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn model_ref<'a>(m: *const SeqkdModel) -> FfiResult<&'a Seq2SeqModel> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path(p: *const c_char) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (SeqkdStatus::InvalidUtf8, "path is not valid UTF-8".into()))
}

unsafe fn write_out<T: Copy>(data: &[T], out: *mut T, cap: usize, out_len: *mut usize) -> FfiResult<()> {
    if out_len.is_null() {
        return Err(null("out_len"));
    }
    *out_len = data.len();
    if data.len() > cap {
        return Err((SeqkdStatus::BufferTooSmall, format!("need {} elements, buffer holds {cap}", data.len())));
    }
    if !data.is_empty() {
        if out.is_null() {
            return Err(null("output buffer"));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    Ok(())
}

fn ids(tokens: &[u32]) -> Vec<usize> {
    tokens.iter().map(|&t| t as usize).collect()
}

fn to_u32(tokens: &[usize]) -> Vec<u32> {
    tokens.iter().map(|&t| t as u32).collect()
}

/// Message of the last failed call on this thread (empty if none). Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn seqkd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn seqkd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a randomly initialized model. A decoder-only model ignores
/// `encoder_layers`.
#[no_mangle]
pub unsafe extern "C" fn seqkd_model_new(
    encoder_layers: usize,
    decoder_layers: usize,
    d_model: usize,
    heads: usize,
    vocab_size: usize,
    max_len: usize,
    decoder_only: bool,
    seed: u64,
    out: *mut *mut SeqkdModel,
) -> SeqkdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if decoder_only {
            ModelConfig::decoder_only(decoder_layers, d_model, heads, vocab_size, max_len)
        } else {
            ModelConfig::encoder_decoder((encoder_layers, decoder_layers), d_model, heads, vocab_size, max_len)
        };
        let inner = core(Seq2SeqModel::new(cfg, seed))?;
        *out = Box::into_raw(Box::new(SeqkdModel { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn seqkd_model_load(path_utf8: *const c_char, out: *mut *mut SeqkdModel) -> SeqkdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = core(Seq2SeqModel::load(&path(path_utf8)?))?;
        *out = Box::into_raw(Box::new(SeqkdModel { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn seqkd_model_save(model: *const SeqkdModel, path_utf8: *const c_char) -> SeqkdStatus {
    guard(|| core(model_ref(model)?.save(&path(path_utf8)?)))
}

/// Releases a handle; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn seqkd_model_free(model: *mut SeqkdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn seqkd_model_num_parameters(model: *const SeqkdModel, out: *mut usize) -> SeqkdStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.num_parameters();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn seqkd_model_vocab_size(model: *const SeqkdModel, out: *mut usize) -> SeqkdStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.config().vocab_size;
        Ok(())
    })
}

/// Teacher-forced logits for one example, `target_len * vocab_size` values in
/// row-major order (inference mode, no dropout).
#[no_mangle]
pub unsafe extern "C" fn seqkd_forward_logits(
    model: *const SeqkdModel,
    source: *const u32,
    source_len: usize,
    target: *const u32,
    target_len: usize,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> SeqkdStatus {
    guard(|| {
        let m = model_ref(model)?;
        let src = ids(slice(source, source_len, "source")?);
        let tgt = ids(slice(target, target_len, "target")?);
        let mut g = Graph::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = core(m.forward(&mut g, &[src], &[tgt], false, &mut rng))?;
        let rows: Vec<f64> = trace.example_logits(&g, 0).concat();
        write_out(&rows, out, cap, out_len)
    })
}

/// Greedy decoding; the output ends with EOS unless `max_len` was reached.
#[no_mangle]
pub unsafe extern "C" fn seqkd_greedy(
    model: *const SeqkdModel,
    source: *const u32,
    source_len: usize,
    max_len: usize,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> SeqkdStatus {
    guard(|| {
        let m = model_ref(model)?;
        let src = ids(slice(source, source_len, "source")?);
        let dec = IncrementalDecoder::new(m);
        let toks = core(greedy(&dec, &[src], max_len))?.remove(0);
        write_out(&to_u32(&toks), out, cap, out_len)
    })
}

/// Best beam and its total log-probability.
#[no_mangle]
pub unsafe extern "C" fn seqkd_beam_search(
    model: *const SeqkdModel,
    source: *const u32,
    source_len: usize,
    beam_k: usize,
    max_len: usize,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
    out_logprob: *mut f64,
) -> SeqkdStatus {
    guard(|| {
        let m = model_ref(model)?;
        let src = ids(slice(source, source_len, "source")?);
        if out_logprob.is_null() {
            return Err(null("out_logprob"));
        }
        let dec = IncrementalDecoder::new(m);
        let best = core(beam_search(&dec, &[src], beam_k, max_len))?.remove(0).remove(0);
        write_out(&to_u32(&best.tokens), out, cap, out_len)?;
        *out_logprob = best.logprob;
        Ok(())
    })
}

/// Attention cost in cell units: m²E + n(m+n)D for encoder-decoders,
/// m²D + n(m+n)D for decoder-only models.
#[no_mangle]
pub extern "C" fn seqkd_theoretical_cost(encoder_layers: usize, decoder_layers: usize, decoder_only: bool, m: u64, n: u64) -> u64 {
    let mut cfg = ModelConfig::encoder_decoder((encoder_layers, decoder_layers), 8, 1, 8, 8);
    if decoder_only {
        cfg.arch = Arch::DecoderOnly;
        cfg.encoder_layers = 0;
    }
    theoretical_cost(&cfg, m, n)
}

/// Corpus BLEU in [0, 1] over one hypothesis/reference pair.
#[no_mangle]
pub unsafe extern "C" fn seqkd_bleu(hyp: *const u32, hyp_len: usize, reference: *const u32, ref_len: usize, out: *mut f64) -> SeqkdStatus {
    guard(|| {
        let h = slice(hyp, hyp_len, "hypothesis")?.to_vec();
        let r = slice(reference, ref_len, "reference")?.to_vec();
        if out.is_null() {
            return Err(null("out"));
        }
        *out = core(bleu(&[h], &[r]))?;
        Ok(())
    })
}

/// `(kd - s) / (t - s)`; for `lower_is_better` metrics all three are negated first.
#[no_mangle]
pub unsafe extern "C" fn seqkd_gap_closure(s: f64, t: f64, kd: f64, lower_is_better: bool, out: *mut f64) -> SeqkdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = if lower_is_better { Direction::LowerIsBetter } else { Direction::HigherIsBetter };
        *out = core(gap_closure(s, t, kd, dir))?;
        Ok(())
    })
}

unsafe fn strings<'a>(p: *const *const c_char, len: usize, what: &str) -> FfiResult<Vec<&'a str>> {
    slice(p, len, what)?
        .iter()
        .map(|&s| {
            if s.is_null() {
                return Err(null(what));
            }
            CStr::from_ptr(s).to_str().map_err(|_| (SeqkdStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
        })
        .collect()
}

/// Needleman-Wunsch alignment of two token-string sequences with the default
/// scoring (exact 2, prefix 1, mismatch -1, gap -1).
#[no_mangle]
pub unsafe extern "C" fn seqkd_nw_align(
    teacher: *const *const c_char,
    teacher_len: usize,
    student: *const *const c_char,
    student_len: usize,
    out: *mut SeqkdAlignOp,
    cap: usize,
    out_len: *mut usize,
) -> SeqkdStatus {
    guard(|| {
        let t = strings(teacher, teacher_len, "teacher token")?;
        let s = strings(student, student_len, "student token")?;
        let ops: Vec<SeqkdAlignOp> = nw_align(&t, &s, &NwScoring::default())
            .into_iter()
            .map(|op| SeqkdAlignOp {
                kind: match op.kind {
                    OpKind::Match => SeqkdOpKind::Match,
                    OpKind::Replace => SeqkdOpKind::Replace,
                    OpKind::Insert => SeqkdOpKind::Insert,
                    OpKind::Delete => SeqkdOpKind::Delete,
                },
                teacher_index: op.teacher_index.map_or(-1, |i| i as i64),
                student_index: op.student_index.map_or(-1, |i| i as i64),
                is_prefix_match: op.is_prefix_match,
            })
            .collect();
        write_out(&ops, out, cap, out_len)
    })
}
