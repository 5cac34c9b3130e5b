use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use kvadapt::cli::{cmd_add_task, cmd_pretrain};
use kvadapt::config::RunConfig;
use kvadapt::storage::key_loss;
use kvadapt::workflow::{acceptance_tasks, pretrain_tasks};
use kvadapt_ffi::*;

fn last_error() -> String {
    let p = kva_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// A two-task run with a small backbone and short schedules.
fn tiny_run(dir: &Path) -> CString {
    let mut cfg = RunConfig::with_seed(4);
    cfg.backbone.d_v = 16;
    cfg.backbone.d_t = 16;
    cfg.backbone.n_layers_v = 1;
    cfg.backbone.n_layers_t = 1;
    cfg.backbone.n_heads = 2;
    cfg.pretrain.encoder_epochs = 1;
    cfg.pretrain.decoder_epochs = 2;
    let all = acceptance_tasks();
    cfg.tasks = vec![all[0].clone(), all[1].clone()];
    for t in &mut cfg.tasks {
        t.n_per_class = 10;
    }
    cfg.pretrain_tasks = pretrain_tasks()[..1].to_vec();
    for p in [&mut cfg.train.patch, &mut cfg.train.slide] {
        p.epochs = 2;
    }
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    cmd_pretrain(&cfg).unwrap();
    for t in &cfg.tasks {
        cmd_add_task(&cfg, &t.spec.task_id).unwrap();
    }
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn key_loss_matches_the_library() {
    let k = [0.3, -1.0, 0.5];
    let q = [1.0, 0.2, 0.1];
    let prev = [0.0, 1.0, 0.0, 0.4, 0.4, -0.2];
    let mut out = f64::NAN;
    let s = unsafe { kva_key_loss(k.as_ptr(), q.as_ptr(), 3, prev.as_ptr(), 2, &mut out) };
    assert_eq!(s, KvaStatus::Ok);
    let expected = key_loss(&k, &q, &[&prev[..3], &prev[3..]]).unwrap();
    assert_eq!(out, expected);
    let s = unsafe { kva_key_loss(k.as_ptr(), q.as_ptr(), 3, ptr::null(), 0, &mut out) };
    assert_eq!(s, KvaStatus::Ok);
    assert_eq!(out, key_loss(&k, &q, &[]).unwrap());
}

#[test]
fn errors_set_status_and_message() {
    let zero = [0.0; 2];
    let mut out = 0.0;
    let s = unsafe { kva_key_loss(zero.as_ptr(), zero.as_ptr(), 2, ptr::null(), 0, &mut out) };
    assert_eq!(s, KvaStatus::Dimension);
    assert!(last_error().contains("zero-norm"));
    let s = unsafe { kva_key_loss(ptr::null(), zero.as_ptr(), 2, ptr::null(), 0, &mut out) };
    assert_eq!(s, KvaStatus::NullPointer);
    let mut session = ptr::null_mut();
    let missing = CString::new("/nonexistent/run.toml").unwrap();
    assert_eq!(unsafe { kva_session_open(missing.as_ptr(), &mut session) }, KvaStatus::MissingArtifact);
    assert!(session.is_null());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 1\n").unwrap();
    let path = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { kva_session_open(path.as_ptr(), &mut session) }, KvaStatus::MissingArtifact);
    assert!(last_error().contains("kvadapt pretrain"));
    unsafe {
        kva_session_free(ptr::null_mut());
        kva_prediction_free(ptr::null_mut());
    }
    assert_eq!(unsafe { kva_session_task_count(ptr::null()) }, 0);
    assert!(!unsafe { CStr::from_ptr(kva_version()) }.to_str().unwrap().is_empty());
}

#[test]
fn session_predicts_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_run(dir.path());
    let mut session = ptr::null_mut();
    assert_eq!(unsafe { kva_session_open(cfg_path.as_ptr(), &mut session) }, KvaStatus::Ok);
    assert_eq!(unsafe { kva_session_task_count(session) }, 2);

    let cfg = RunConfig::load(Path::new(cfg_path.to_str().unwrap())).unwrap();
    let bag_dir = cfg.paths.dataset("breast_metastasis").join("images/bag0_0000");
    let bag = CString::new(bag_dir.to_str().unwrap()).unwrap();
    let task = CString::new("breast_metastasis").unwrap();
    let mut pred = ptr::null_mut();
    let s = unsafe { kva_predict(session, bag.as_ptr(), ptr::null(), task.as_ptr(), &mut pred) };
    assert_eq!(s, KvaStatus::Ok, "{}", last_error());
    let n = unsafe { kva_prediction_attention_len(pred) };
    assert!(n >= 4);
    let mut buf = vec![0.0; n + 2];
    assert_eq!(unsafe { kva_prediction_attention(pred, buf.as_mut_ptr(), buf.len()) }, n);
    assert!((buf[..n].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let id = unsafe { CStr::from_ptr(kva_prediction_task_id(pred)) };
    assert_eq!(id.to_str().unwrap(), "breast_metastasis");
    let label = unsafe { CStr::from_ptr(kva_prediction_label(pred)) }.to_str().unwrap().to_string();
    let expected = kvadapt::cli::cmd_predict(&cfg, "breast_metastasis", &bag_dir, None, kvadapt::metrics::PromptMode::Full).unwrap();
    assert_eq!(label, expected.label_text);
    assert_eq!(unsafe { kva_prediction_terminated(pred) }, i32::from(expected.terminated_by_eos));
    unsafe { kva_prediction_free(pred) };

    let unknown = CString::new("nope").unwrap();
    let s = unsafe { kva_predict(session, bag.as_ptr(), ptr::null(), unknown.as_ptr(), &mut pred) };
    assert_eq!(s, KvaStatus::UnknownTask);
    assert!(pred.is_null());
    let s = unsafe { kva_predict(session, bag.as_ptr(), ptr::null(), ptr::null(), &mut pred) };
    assert_eq!(s, KvaStatus::NullPointer);
    let oov = CString::new("zzz qqq").unwrap();
    let s = unsafe { kva_predict(session, bag.as_ptr(), oov.as_ptr(), ptr::null(), &mut pred) };
    assert_eq!(s, KvaStatus::OutOfVocabulary);
    unsafe { kva_session_free(session) };
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"kvadapt.h\"\nint main(void) { KvaSession *s = 0; return (int)kva_session_open(\"x\", &s); }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header)
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
