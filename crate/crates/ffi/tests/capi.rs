use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use poserec::config::TrainConfig;
use poserec::dataio::{split_dataset, write_synthetic, Dataset, DatasetPaths, SynthSpec};
use poserec::evaluator::{build_item_index, recommend};
use poserec::item_encoder::ItemRecord;
use poserec::trainer::{train, TrainOptions};
use poserec_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    checkpoint: CString,
    items: CString,
    dataset: Dataset,
    model: poserec::model::PoseRecModel,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = SynthSpec {
        n_classes: 3,
        videos_per_class: 6,
        items_per_class: 6,
        shared_items: 2,
        ..SynthSpec::default()
    };
    let paths = write_synthetic(&spec, &root.join("data")).unwrap();
    let dataset = Dataset::load(&paths).unwrap();
    let split = split_dataset(&dataset.video_ids(), dataset.classes.as_ref(), (0.6, 0.2, 0.2), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let out = root.join("run");
    let outcome = train(
        &dataset,
        &split,
        &cfg,
        &TrainOptions {
            out_dir: Some(out.clone()),
            validate: false,
            verbose: false,
        },
    )
    .unwrap();
    Fixture {
        checkpoint: cstr(&out.join("model.psrc")),
        items: cstr(&DatasetPaths::in_dir(&root.join("data")).items),
        _dir: dir,
        root,
        dataset,
        model: outcome.model,
    }
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = poserec_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn open(f: &Fixture) -> *mut PoserecEngine {
    let mut e = ptr::null_mut();
    let s = unsafe { poserec_engine_open(f.checkpoint.as_ptr(), f.items.as_ptr(), &mut e) };
    assert_eq!(s, PoserecStatus::Ok, "{}", last_error());
    assert!(!e.is_null());
    e
}

#[test]
fn recommend_matches_the_rust_api() {
    let f = fixture();
    let e = open(&f);
    let traj = &f.dataset.poses[0];
    let frames = traj.frames.data();
    let n_frames = traj.num_frames();

    let n_items = unsafe { poserec_engine_item_count(e) };
    assert_eq!(n_items, f.dataset.items.len());
    let refs: Vec<&ItemRecord> = f.dataset.items.iter().collect();
    let index = build_item_index(&f.model, &refs, &[]).unwrap();
    let expect = recommend(&f.model, &index, traj, 5, 5).unwrap();

    let mut items = [0usize; 5];
    let mut scores = [0f64; 5];
    let mut count = 0usize;
    let s = unsafe {
        poserec_recommend(
            e,
            frames.as_ptr(),
            n_frames,
            5,
            items.as_mut_ptr(),
            scores.as_mut_ptr(),
            &mut count,
        )
    };
    assert_eq!(s, PoserecStatus::Ok, "{}", last_error());
    assert_eq!(count, 5);
    for (j, (id, score)) in expect.items.iter().enumerate() {
        let mut buf = [0 as std::ffi::c_char; 64];
        let mut needed = 0usize;
        let s = unsafe { poserec_item_id(e, items[j], buf.as_mut_ptr(), buf.len(), &mut needed) };
        assert_eq!(s, PoserecStatus::Ok);
        assert_eq!(needed, id.len() + 1);
        assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), id);
        assert_eq!(scores[j].to_bits(), score.to_bits());

        let cid = CString::new(id.as_str()).unwrap();
        let mut pos = usize::MAX;
        assert_eq!(
            unsafe { poserec_find_item(e, cid.as_ptr(), &mut pos) },
            PoserecStatus::Ok
        );
        assert_eq!(pos, items[j]);
    }

    let mut all = vec![0f64; n_items];
    assert_eq!(
        unsafe { poserec_score_video(e, frames.as_ptr(), n_frames, all.as_mut_ptr(), all.len()) },
        PoserecStatus::Ok
    );
    assert_eq!(all[items[0]], scores[0]);
    assert!(all.iter().all(|&s| s <= scores[0]));
    unsafe { poserec_engine_free(e) };
}

#[test]
fn encode_reports_window_count_and_checks_buffers() {
    let f = fixture();
    let e = open(&f);
    let traj = &f.dataset.poses[1];
    let dim = unsafe { poserec_engine_embed_dim(e) };
    let wl = unsafe { poserec_engine_window_len(e) };
    assert_eq!((dim, wl), (256, 10));

    let mut n = 0usize;
    let s = unsafe {
        poserec_encode_video(
            e,
            traj.frames.data().as_ptr(),
            traj.num_frames(),
            ptr::null_mut(),
            0,
            &mut n,
        )
    };
    assert_eq!(s, PoserecStatus::BufferTooSmall);
    assert_eq!(n, 3);
    assert!(last_error().contains("doubles"));

    let mut out = vec![0f64; n * dim];
    let s = unsafe {
        poserec_encode_video(
            e,
            traj.frames.data().as_ptr(),
            traj.num_frames(),
            out.as_mut_ptr(),
            out.len(),
            &mut n,
        )
    };
    assert_eq!(s, PoserecStatus::Ok);
    let windows = poserec::trainer::sliding_windows(traj, 10, 5).unwrap();
    let refs: Vec<_> = windows.iter().collect();
    let expect: Vec<f64> = f.model.encode_windows(&refs).unwrap().concat();
    assert_eq!(out, expect);

    // fewer frames than one window
    let s = unsafe { poserec_encode_video(e, traj.frames.data().as_ptr(), 4, out.as_mut_ptr(), out.len(), &mut n) };
    assert_eq!(s, PoserecStatus::Data);
    unsafe { poserec_engine_free(e) };
}

#[test]
fn errors_are_codes_not_crashes() {
    let f = fixture();
    let mut e = ptr::null_mut();
    let missing = cstr(&f.root.join("nope.psrc"));
    assert_eq!(
        unsafe { poserec_engine_open(missing.as_ptr(), f.items.as_ptr(), &mut e) },
        PoserecStatus::Io
    );
    assert!(e.is_null());
    assert!(last_error().contains("nope.psrc"));

    // an item file is not a checkpoint
    assert_eq!(
        unsafe { poserec_engine_open(f.items.as_ptr(), f.items.as_ptr(), &mut e) },
        PoserecStatus::Format
    );
    assert_eq!(
        unsafe { poserec_engine_open(ptr::null(), f.items.as_ptr(), &mut e) },
        PoserecStatus::NullArgument
    );
    assert_eq!(
        unsafe { poserec_engine_open(f.checkpoint.as_ptr(), f.items.as_ptr(), ptr::null_mut()) },
        PoserecStatus::NullArgument
    );

    let e = open(&f);
    let mut pos = 0usize;
    let unknown = CString::new("no_such_item").unwrap();
    assert_eq!(
        unsafe { poserec_find_item(e, unknown.as_ptr(), &mut pos) },
        PoserecStatus::Data
    );
    let mut needed = 0usize;
    assert_eq!(
        unsafe { poserec_item_id(e, 10_000, ptr::null_mut(), 0, &mut needed) },
        PoserecStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { poserec_item_id(e, 0, ptr::null_mut(), 0, &mut needed) },
        PoserecStatus::BufferTooSmall
    );
    assert!(needed > 1);

    let traj = &f.dataset.poses[0];
    let (mut items, mut scores, mut count) = ([0usize; 1], [0f64; 1], 0usize);
    let s = unsafe {
        poserec_recommend(
            e,
            traj.frames.data().as_ptr(),
            traj.num_frames(),
            0,
            items.as_mut_ptr(),
            scores.as_mut_ptr(),
            &mut count,
        )
    };
    assert_eq!(s, PoserecStatus::InvalidArgument);
    let mut short = [0f64; 1];
    assert_eq!(
        unsafe { poserec_score_video(e, traj.frames.data().as_ptr(), traj.num_frames(), short.as_mut_ptr(), 1) },
        PoserecStatus::BufferTooSmall
    );
    assert_eq!(unsafe { poserec_engine_item_count(ptr::null()) }, 0);
    unsafe { poserec_engine_free(e) };
    unsafe { poserec_engine_free(ptr::null_mut()) };
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(poserec_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// Compile a C program against the generated header and the static library.
#[test]
fn c_program_links_against_the_header() {
    let f = fixture();
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = exe_dir.join("libposerec_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());

    let src = f.root.join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "poserec.h"
int main(int argc, char **argv) {
    PoserecEngine *e = NULL;
    if (poserec_engine_open(argv[1], argv[2], &e) != POSEREC_STATUS_OK) {
        fprintf(stderr, "%s\n", poserec_last_error());
        return 1;
    }
    double frames[20 * POSEREC_FRAME_LEN];
    for (int i = 0; i < 20 * POSEREC_FRAME_LEN; i++) frames[i] = (i % 7) * 0.1;
    size_t items[3], count = 0;
    double scores[3];
    if (poserec_recommend(e, frames, 20, 3, items, scores, &count) != POSEREC_STATUS_OK) return 2;
    char id[128];
    for (size_t j = 0; j < count; j++) {
        if (poserec_item_id(e, items[j], id, sizeof id, NULL) != POSEREC_STATUS_OK) return 3;
        printf("%zu,%s,%.6f\n", j + 1, id, scores[j]);
    }
    if (poserec_recommend(e, frames, 20, 0, items, scores, &count) != POSEREC_STATUS_INVALID_ARGUMENT) return 4;
    poserec_engine_free(e);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = f.root.join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin)
        .arg(f.checkpoint.to_str().unwrap())
        .arg(f.items.to_str().unwrap())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("1,"));
}
