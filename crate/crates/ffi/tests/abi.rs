use std::ffi::{CStr, CString};
use std::ptr;

use seqkd_ffi::*;

fn new_model(seed: u64) -> *mut SeqkdModel {
    let mut m = ptr::null_mut();
    let s = unsafe { seqkd_model_new(1, 1, 16, 2, 12, 16, false, seed, &mut m) };
    assert_eq!(s, SeqkdStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(seqkd_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn model_lifecycle_and_decoding() {
    let m = new_model(3);
    let mut n = 0usize;
    assert_eq!(unsafe { seqkd_model_num_parameters(m, &mut n) }, SeqkdStatus::Ok);
    assert!(n > 0);
    let mut v = 0usize;
    assert_eq!(unsafe { seqkd_model_vocab_size(m, &mut v) }, SeqkdStatus::Ok);
    assert_eq!(v, 12);

    let src = [5u32, 6, 7];
    let mut out = [0u32; 16];
    let mut len = 0usize;
    assert_eq!(unsafe { seqkd_greedy(m, src.as_ptr(), src.len(), 6, out.as_mut_ptr(), out.len(), &mut len) }, SeqkdStatus::Ok);
    assert!(len >= 1 && len <= 6);
    let greedy = out[..len].to_vec();

    let mut lp = 0.0;
    let mut blen = 0usize;
    let s = unsafe { seqkd_beam_search(m, src.as_ptr(), src.len(), 1, 6, out.as_mut_ptr(), out.len(), &mut blen, &mut lp) };
    assert_eq!(s, SeqkdStatus::Ok);
    assert_eq!(&out[..blen], &greedy[..]);
    assert!(lp <= 0.0);

    // Buffer too small reports the needed length.
    let mut small = [0u32; 0];
    let s = unsafe { seqkd_greedy(m, src.as_ptr(), src.len(), 6, small.as_mut_ptr(), 0, &mut len) };
    assert_eq!(s, SeqkdStatus::BufferTooSmall);
    assert_eq!(len, greedy.len());

    // Round trip through a checkpoint gives identical logits.
    let dir = tempfile::tempdir().unwrap();
    let p = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { seqkd_model_save(m, p.as_ptr()) }, SeqkdStatus::Ok);
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { seqkd_model_load(p.as_ptr(), &mut m2) }, SeqkdStatus::Ok);
    let tgt = [7u32, 6, 5, 2];
    let mut a = vec![0.0; 4 * 12];
    let mut b = vec![0.0; 4 * 12];
    let (mut la, mut lb) = (0, 0);
    assert_eq!(unsafe { seqkd_forward_logits(m, src.as_ptr(), 3, tgt.as_ptr(), 4, a.as_mut_ptr(), a.len(), &mut la) }, SeqkdStatus::Ok);
    assert_eq!(unsafe { seqkd_forward_logits(m2, src.as_ptr(), 3, tgt.as_ptr(), 4, b.as_mut_ptr(), b.len(), &mut lb) }, SeqkdStatus::Ok);
    assert_eq!(la, 48);
    assert_eq!(a, b);
    unsafe {
        seqkd_model_free(m);
        seqkd_model_free(m2);
        seqkd_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut m = ptr::null_mut();
    // 3 heads do not divide d_model 16.
    assert_eq!(unsafe { seqkd_model_new(1, 1, 16, 3, 12, 16, false, 0, &mut m) }, SeqkdStatus::Config);
    assert!(!last_error().is_empty());
    let mut n = 0usize;
    assert_eq!(unsafe { seqkd_model_num_parameters(ptr::null(), &mut n) }, SeqkdStatus::NullPointer);
    assert!(last_error().contains("NULL"));
    let p = CString::new("/nonexistent/x.ckpt").unwrap();
    assert_ne!(unsafe { seqkd_model_load(p.as_ptr(), &mut m) }, SeqkdStatus::Ok);

    let good = new_model(1);
    let src = [50u32];
    let mut out = [0u32; 4];
    let mut len = 0;
    assert_eq!(unsafe { seqkd_greedy(good, src.as_ptr(), 1, 4, out.as_mut_ptr(), 4, &mut len) }, SeqkdStatus::TokenOutOfRange);
    unsafe { seqkd_model_free(good) };
    let mut g = 0.0;
    assert_eq!(unsafe { seqkd_gap_closure(1.0, 1.0, 2.0, false, &mut g) }, SeqkdStatus::InvalidArgument);
}

#[test]
fn stateless_helpers() {
    assert_eq!(seqkd_theoretical_cost(2, 2, false, 8, 4), 2 * 64 + 2 * 48);
    for m in 1..10u64 {
        for n in 1..10u64 {
            assert_eq!(seqkd_theoretical_cost(3, 3, false, m, n), seqkd_theoretical_cost(0, 3, true, m, n));
        }
    }
    let mut g = 0.0;
    assert_eq!(unsafe { seqkd_gap_closure(10.0, 20.0, 15.0, false, &mut g) }, SeqkdStatus::Ok);
    assert_eq!(g, 0.5);
    assert_eq!(unsafe { seqkd_gap_closure(4.0, 2.0, 3.0, true, &mut g) }, SeqkdStatus::Ok);
    assert_eq!(g, 0.5);
    let h = [1u32, 2, 3, 4];
    let mut b = 0.0;
    assert_eq!(unsafe { seqkd_bleu(h.as_ptr(), 4, h.as_ptr(), 4, &mut b) }, SeqkdStatus::Ok);
    assert!((b - 1.0).abs() < 1e-12);

    let t: Vec<CString> = ["Rob", "ert", "s"].iter().map(|s| CString::new(*s).unwrap()).collect();
    let s: Vec<CString> = ["Robert", "s"].iter().map(|s| CString::new(*s).unwrap()).collect();
    let tp: Vec<*const std::ffi::c_char> = t.iter().map(|c| c.as_ptr()).collect();
    let sp: Vec<*const std::ffi::c_char> = s.iter().map(|c| c.as_ptr()).collect();
    let mut ops = [SeqkdAlignOp { kind: SeqkdOpKind::Match, teacher_index: 0, student_index: 0, is_prefix_match: false }; 8];
    let mut len = 0;
    assert_eq!(unsafe { seqkd_nw_align(tp.as_ptr(), 3, sp.as_ptr(), 2, ops.as_mut_ptr(), 8, &mut len) }, SeqkdStatus::Ok);
    assert_eq!(len, 3);
    assert_eq!((ops[0].kind, ops[0].is_prefix_match), (SeqkdOpKind::Replace, true));
    assert_eq!((ops[1].kind, ops[1].teacher_index, ops[1].student_index), (SeqkdOpKind::Delete, 1, -1));
    assert_eq!((ops[2].kind, ops[2].teacher_index, ops[2].student_index), (SeqkdOpKind::Match, 2, 1));
    let v = unsafe { CStr::from_ptr(seqkd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
