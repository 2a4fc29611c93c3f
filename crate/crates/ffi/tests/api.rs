use std::ffi::{CStr, CString};
use std::ptr;

use dlam::digest::{self, Algo};
use dlam::nn::{save_checkpoint, Checkpoint, Model, ModelConfig};
use dlam_ffi::*;

fn bytes(n: usize) -> Vec<u8> {
    dlam::rng::Stream::new(7).bytes(n)
}

unsafe fn hash(algo: DlamAlgo, data: &[u8]) -> *mut DlamDigest {
    let mut d = ptr::null_mut();
    assert_eq!(
        dlam_digest_hash(algo, data.as_ptr(), data.len(), &mut d),
        DlamStatus::Ok
    );
    d
}

unsafe fn text(d: *const DlamDigest) -> String {
    let mut needed = 0;
    assert_eq!(
        dlam_digest_to_string(d, ptr::null_mut(), 0, &mut needed),
        DlamStatus::BufferTooSmall
    );
    let mut buf = vec![0u8; needed];
    assert_eq!(
        dlam_digest_to_string(d, buf.as_mut_ptr().cast(), buf.len(), ptr::null_mut()),
        DlamStatus::Ok
    );
    CStr::from_bytes_with_nul(&buf)
        .unwrap()
        .to_str()
        .unwrap()
        .to_owned()
}

#[test]
fn digests_match_the_library() {
    let data = bytes(5000);
    unsafe {
        for (code, algo) in [
            (DLAM_ALGO_SSDEEP, Algo::Ssdeep),
            (DLAM_ALGO_TLSH, Algo::Tlsh),
        ] {
            let d = hash(code, &data);
            assert_eq!(text(d), digest::hash(algo, &data).unwrap().to_string());
            let mut a = 99;
            assert_eq!(dlam_digest_algorithm(d, &mut a), DlamStatus::Ok);
            assert_eq!(a, code);

            let c = CString::new(text(d)).unwrap();
            let mut parsed = ptr::null_mut();
            assert_eq!(
                dlam_digest_parse(code, c.as_ptr(), &mut parsed),
                DlamStatus::Ok
            );
            let mut score = 12345;
            assert_eq!(dlam_digest_compare(d, parsed, &mut score), DlamStatus::Ok);
            assert_eq!(score, if algo == Algo::Ssdeep { 100 } else { 0 });
            dlam_digest_free(parsed);
            dlam_digest_free(d);
        }
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut d = ptr::null_mut();
        let short = bytes(49);
        assert_eq!(
            dlam_digest_hash(DLAM_ALGO_TLSH, short.as_ptr(), short.len(), &mut d),
            DlamStatus::InputTooShort
        );
        assert!(d.is_null());
        let msg = CStr::from_ptr(dlam_last_error()).to_str().unwrap();
        assert!(msg.starts_with("InputTooShort"), "{msg}");
        assert_eq!(
            CStr::from_ptr(dlam_status_name(DlamStatus::InputTooShort))
                .to_str()
                .unwrap(),
            "InputTooShort"
        );

        assert_eq!(
            dlam_digest_hash(DLAM_ALGO_SSDEEP, ptr::null(), 0, &mut d),
            DlamStatus::EmptyInput
        );
        assert_eq!(
            dlam_digest_hash(7, short.as_ptr(), 1, &mut d),
            DlamStatus::InvalidAlgorithm
        );
        assert_eq!(
            dlam_digest_hash(DLAM_ALGO_SSDEEP, short.as_ptr(), 1, ptr::null_mut()),
            DlamStatus::NullPointer
        );
        let bad = CString::new("3:abc").unwrap();
        assert_eq!(
            dlam_digest_parse(DLAM_ALGO_SSDEEP, bad.as_ptr(), &mut d),
            DlamStatus::MalformedDigest
        );

        let a = hash(DLAM_ALGO_SSDEEP, &short);
        let b = hash(DLAM_ALGO_TLSH, &bytes(500));
        let mut s = 0;
        assert_eq!(
            dlam_digest_compare(a, b, &mut s),
            DlamStatus::MixedAlgorithms
        );
        assert_eq!(
            dlam_digest_compare(a, ptr::null(), &mut s),
            DlamStatus::NullPointer
        );

        // A successful call clears the message.
        assert_eq!(dlam_digest_compare(a, a, &mut s), DlamStatus::Ok);
        assert!(dlam_last_error().is_null());
        dlam_digest_free(a);
        dlam_digest_free(b);
        dlam_digest_free(ptr::null_mut());
    }
}

#[test]
fn model_predicts_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut cfg = ModelConfig::transformer(Algo::Ssdeep, 3);
    cfg.embed_dim = 16;
    cfg.ffn_dim = 32;
    let model = Model::<f32>::new(cfg.clone()).unwrap();
    let ckpt = Checkpoint {
        config: cfg,
        train_config: None,
        history: Vec::new(),
        best_epoch: None,
        params: model.params.clone(),
    };
    save_checkpoint(&ckpt, &path).unwrap();
    let data = bytes(5000);
    let expected = dlam::nn::predict(
        &ckpt,
        &[dlam::featurize::tokenize(
            &digest::hash(Algo::Ssdeep, &data).unwrap(),
        )],
    )
    .unwrap()[0];

    unsafe {
        let p = CString::new(path.to_str().unwrap()).unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(dlam_model_load(p.as_ptr(), &mut m), DlamStatus::Ok);
        let mut a = 9;
        assert_eq!(dlam_model_algorithm(m, &mut a), DlamStatus::Ok);
        assert_eq!(a, DLAM_ALGO_SSDEEP);
        let d = hash(DLAM_ALGO_SSDEEP, &data);
        let (mut prob, mut label) = (0f32, 9u8);
        assert_eq!(
            dlam_model_predict(m, d, &mut prob, &mut label),
            DlamStatus::Ok
        );
        assert_eq!(prob.to_bits(), expected.probability.to_bits());
        assert_eq!(label, expected.label);

        let t = hash(DLAM_ALGO_TLSH, &data);
        assert_eq!(
            dlam_model_predict(m, t, &mut prob, &mut label),
            DlamStatus::MixedAlgorithms
        );
        dlam_digest_free(t);
        dlam_digest_free(d);
        dlam_model_free(m);

        let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
        assert_eq!(
            dlam_model_load(missing.as_ptr(), &mut m),
            DlamStatus::IoFailure
        );
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(dlam_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
