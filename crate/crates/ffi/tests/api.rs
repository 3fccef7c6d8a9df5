use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use bev2d::scenegen::{generate_dataset, write_dataset, SceneConfig};
use bev2d_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(bev2d_last_error()) }.to_string_lossy().into_owned()
}

fn axis_camera() -> Bev2dCamera {
    Bev2dCamera {
        fx: 1000.0,
        fy: 1000.0,
        cx: 500.0,
        cy: 500.0,
        rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        translation: [0.0; 3],
        width: 1000,
        height: 1000,
    }
}

#[test]
fn projection_and_jacobian() {
    let cam = axis_camera();
    let cube = Bev2dBox3D {
        center: [0.0, 0.0, 10.0],
        dims: [1.0; 3],
        yaw: 0.0,
    };
    let mut out = Bev2dBox2D::default();
    let mut jac = [0.0; 35];
    let s = unsafe { bev2d_project_box(&cam, &cube, &mut out, jac.as_mut_ptr()) };
    assert_eq!(s, Bev2dStatus::Ok);
    assert!((out.x - 500.0).abs() < 1e-9);
    assert!((out.w - 1000.0 / 9.5).abs() < 1e-9);
    assert_eq!(out.depth, 10.0);
    assert!((jac[0] - 1000.0 / 9.5).abs() < 1e-9);
    // depth row
    assert_eq!(&jac[28..31], &[0.0, 0.0, 1.0]);

    let behind = Bev2dBox3D {
        center: [0.0, 0.0, -10.0],
        ..cube
    };
    assert_eq!(
        unsafe { bev2d_project_box(&cam, &behind, &mut out, ptr::null_mut()) },
        Bev2dStatus::NotVisible
    );
    let flat = Bev2dBox3D {
        dims: [1.0, 0.0, 1.0],
        ..cube
    };
    assert_eq!(
        unsafe { bev2d_project_box(&cam, &flat, &mut out, ptr::null_mut()) },
        Bev2dStatus::InvalidArgument
    );
    assert!(last_error().contains("box"), "{}", last_error());
}

#[test]
fn scalar_functions() {
    let mut v = 0.0;
    assert_eq!(unsafe { bev2d_focal_loss(0.5, 0.25, 2.0, &mut v) }, Bev2dStatus::Ok);
    assert!((v - 0.0433217).abs() < 1e-6);
    assert_eq!(unsafe { bev2d_focal_loss(1.5, 0.25, 2.0, &mut v) }, Bev2dStatus::InvalidArgument);

    let a = Bev2dBox2D {
        x: 0.0,
        y: 0.0,
        w: 2.0,
        h: 2.0,
        depth: 5.0,
    };
    let b = Bev2dBox2D { x: 3.0, ..a };
    assert_eq!(unsafe { bev2d_giou(&a, &b, &mut v) }, Bev2dStatus::Ok);
    // disjoint: IoU 0, hull 5x2 with 4 covered
    assert!((v - (0.0 - 2.0 / 10.0)).abs() < 1e-12);

    let tp = Bev2dTpErrors {
        ate: 0.5941,
        ase: 0.2657,
        aoe: 0.3737,
        ave: 0.4175,
        aae: 0.1808,
    };
    assert_eq!(unsafe { bev2d_nds(0.2717, &tp, &mut v) }, Bev2dStatus::Ok);
    assert!(v > 0.0 && v < 1.0);
    assert_eq!(unsafe { bev2d_nds(1.5, &tp, &mut v) }, Bev2dStatus::InvalidArgument);
}

#[test]
fn hungarian_shapes() {
    let costs = [4.0, 1.0, 6.0, 2.0, 0.0, 5.0];
    let mut assign = [0i64; 2];
    let mut total = 0.0;
    let s = unsafe { bev2d_hungarian(costs.as_ptr(), 2, 3, assign.as_mut_ptr(), &mut total) };
    assert_eq!(s, Bev2dStatus::Ok);
    assert_eq!(assign, [1, 0]);
    assert_eq!(total, 3.0);

    // more predictions than columns leaves one unmatched
    let mut assign = [0i64; 3];
    let s = unsafe { bev2d_hungarian([1.0, 0.0, 2.0].as_ptr(), 3, 1, assign.as_mut_ptr(), &mut total) };
    assert_eq!(s, Bev2dStatus::Ok);
    assert_eq!(assign, [-1, 0, -1]);

    let s = unsafe { bev2d_hungarian([f64::NAN].as_ptr(), 1, 1, assign.as_mut_ptr(), &mut total) };
    assert_eq!(s, Bev2dStatus::InvalidArgument);
    let s = unsafe { bev2d_hungarian(ptr::null(), 0, 0, ptr::null_mut(), &mut total) };
    assert_eq!(s, Bev2dStatus::Ok);
    assert_eq!(total, 0.0);
}

#[test]
fn null_pointers_and_error_buffer() {
    let mut v = 0.0;
    assert_eq!(unsafe { bev2d_giou(ptr::null(), ptr::null(), &mut v) }, Bev2dStatus::NullPointer);
    let msg = last_error();
    assert!(msg.contains("null"));
    let mut needed = 0usize;
    let mut small = [0 as std::ffi::c_char; 2];
    assert_eq!(
        unsafe { bev2d_copy_last_error(small.as_mut_ptr(), small.len(), &mut needed) },
        Bev2dStatus::BufferTooSmall
    );
    assert_eq!(needed, msg.len() + 1);
    let mut buf = vec![0 as std::ffi::c_char; needed];
    assert_eq!(
        unsafe { bev2d_copy_last_error(buf.as_mut_ptr(), buf.len(), &mut needed) },
        Bev2dStatus::Ok
    );
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), msg);
    unsafe {
        bev2d_dataset_free(ptr::null_mut());
        bev2d_depth_map_free(ptr::null_mut());
    }
}

fn small_dataset(dir: &Path) {
    let cfg = SceneConfig {
        image_scale: 0.25,
        min_boxes: 3,
        max_boxes: 6,
        ..SceneConfig::default()
    };
    let ds = generate_dataset(11, 6, 0.5, &cfg).unwrap();
    write_dataset(&ds, dir).unwrap();
}

#[test]
fn dataset_and_depth_handles() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path());
    let path = CString::new(tmp.path().to_str().unwrap()).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { bev2d_dataset_open(path.as_ptr(), &mut ds) }, Bev2dStatus::Ok);
    let mut n = 0usize;
    assert_eq!(unsafe { bev2d_dataset_scene_count(ds, &mut n) }, Bev2dStatus::Ok);
    assert_eq!(n, 6);
    let mut id = ptr::null();
    assert_eq!(unsafe { bev2d_dataset_scene_id(ds, 0, &mut id) }, Bev2dStatus::Ok);
    let id = unsafe { CStr::from_ptr(id) }.to_str().unwrap().to_string();
    assert_eq!(
        unsafe { bev2d_dataset_scene_id(ds, 6, &mut ptr::null()) },
        Bev2dStatus::InvalidArgument
    );

    let mut summary = Bev2dFinetuneSummary::default();
    assert_eq!(unsafe { bev2d_finetune(ds, 2, 0.5, 3, &mut summary) }, Bev2dStatus::Ok);
    assert_eq!(summary.steps, 12);
    assert!(summary.final_median_center_error < summary.initial_median_center_error);
    assert_eq!(unsafe { bev2d_finetune(ds, 2, 1.5, 3, &mut summary) }, Bev2dStatus::InvalidArgument);
    unsafe { bev2d_dataset_free(ds) };

    let depth_file: PathBuf = tmp.path().join("depth").join(format!("{id}_CAM_FRONT.dpm"));
    let dpath = CString::new(depth_file.to_str().unwrap()).unwrap();
    let mut map = ptr::null_mut();
    assert_eq!(unsafe { bev2d_depth_map_load(dpath.as_ptr(), &mut map) }, Bev2dStatus::Ok);
    let (mut w, mut h) = (0u32, 0u32);
    assert_eq!(unsafe { bev2d_depth_map_size(map, &mut w, &mut h) }, Bev2dStatus::Ok);
    assert_eq!((w, h), (400, 225));
    let far_corner = Bev2dBox2D {
        x: -50.0,
        y: -50.0,
        w: 10.0,
        h: 10.0,
        depth: 1.0,
    };
    let mut d = 0.0;
    assert_eq!(
        unsafe { bev2d_depth_map_box_depth(map, &far_corner, &mut d) },
        Bev2dStatus::NoDepth
    );
    unsafe { bev2d_depth_map_free(map) };
}

#[test]
fn corrupted_dataset_reports_checksum() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path());
    let entry = std::fs::read_dir(tmp.path().join("depth")).unwrap().next().unwrap().unwrap();
    let mut bytes = std::fs::read(entry.path()).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(entry.path(), bytes).unwrap();
    let path = CString::new(tmp.path().to_str().unwrap()).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { bev2d_dataset_open(path.as_ptr(), &mut ds) },
        Bev2dStatus::ChecksumMismatch
    );
    assert!(ds.is_null());
    let missing = CString::new("/nonexistent/bev2d").unwrap();
    assert_eq!(unsafe { bev2d_dataset_open(missing.as_ptr(), &mut ds) }, Bev2dStatus::Io);
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn c_compiler() -> Option<String> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(String::from)
}

#[test]
fn header_is_valid_c() {
    let Some(cc) = c_compiler() else {
        eprintln!("no C compiler found, header check skipped");
        return;
    };
    let out = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/c/smoke.c"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn c_program_links_against_static_library() {
    let Some(cc) = c_compiler() else {
        eprintln!("no C compiler found, link check skipped");
        return;
    };
    // the test binary sits in <target>/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libbev2d_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built, link check skipped", lib.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("smoke");
    let out = Command::new(cc)
        .args(["-std=c99", "-I"])
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
