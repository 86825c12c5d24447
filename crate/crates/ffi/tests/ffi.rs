//! Exercise the C ABI exactly as a foreign caller would: through raw
//! pointers and status codes.

use std::ffi::{CStr, CString};
use std::ptr;

use nalgebra::Vector3;
use recon_ffi::*;

fn c_path(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn write_fixture(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let bounds = recon_core::bounds::Aabb::new(
        Vector3::new(-1.0, -1.0, -1.0),
        Vector3::new(1.0, 1.0, 1.0),
    );
    let grid = recon_core::sdf::init_sphere((9, 9, 9), bounds, 0.5);
    let grid_path = dir.join("grid.sdfg");
    recon_core::io::write_sdfg(&grid_path, &grid).unwrap();
    let cam = recon_core::scene::arc_cameras(2, 3.0, Vector3::zeros(), 45.0, 16, 12, 20.0)
        .remove(0);
    let cam_path = dir.join("cam.json");
    recon_core::io::write_json(&cam_path, &cam.to_json()).unwrap();
    (grid_path, cam_path)
}

#[test]
fn grid_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let (grid_path, _) = write_fixture(dir.path());
    let mut grid: *mut ReconGrid = ptr::null_mut();
    unsafe {
        let status = recon_grid_load(c_path(&grid_path).as_ptr(), &mut grid);
        assert_eq!(status, ReconStatus::Ok);
        assert!(!grid.is_null());

        let (mut nx, mut ny, mut nz) = (0u32, 0u32, 0u32);
        assert_eq!(
            recon_grid_resolution(grid, &mut nx, &mut ny, &mut nz),
            ReconStatus::Ok
        );
        assert_eq!((nx, ny, nz), (9, 9, 9));
        let beta = recon_grid_beta(grid);
        assert!(beta > 0.0);

        // Center of the init sphere: sdf = -radius (as f32).
        let mut sdf = 0.0f64;
        assert_eq!(recon_grid_sdf_at(grid, 0.0, 0.0, 0.0, &mut sdf), ReconStatus::Ok);
        assert!((sdf - (-0.5)).abs() < 1e-6, "sdf at center {sdf}");
        // Outside the bounds: forced exterior, clearly positive.
        assert_eq!(recon_grid_sdf_at(grid, 5.0, 0.0, 0.0, &mut sdf), ReconStatus::Ok);
        assert!(sdf > 1.0);

        recon_grid_free(grid);
    }
}

#[test]
fn camera_and_depth_render() {
    let dir = tempfile::tempdir().unwrap();
    let (grid_path, cam_path) = write_fixture(dir.path());
    unsafe {
        let mut grid: *mut ReconGrid = ptr::null_mut();
        assert_eq!(
            recon_grid_load(c_path(&grid_path).as_ptr(), &mut grid),
            ReconStatus::Ok
        );
        let mut cam: *mut ReconCamera = ptr::null_mut();
        assert_eq!(
            recon_camera_load(c_path(&cam_path).as_ptr(), &mut cam),
            ReconStatus::Ok
        );
        let (mut w, mut h) = (0u32, 0u32);
        assert_eq!(recon_camera_size(cam, &mut w, &mut h), ReconStatus::Ok);
        assert_eq!((w, h), (16, 12));

        let mut depth = vec![0.0f32; (w * h) as usize];
        let status =
            recon_render_depth(grid, cam, 64, 1.5, 4.5, depth.as_mut_ptr(), depth.len());
        assert_eq!(status, ReconStatus::Ok);
        // The central pixel looks through the init sphere.
        let center = depth[(h / 2 * w + w / 2) as usize];
        assert!(center > 1.5 && center < 4.5, "center depth {center}");

        // Undersized buffer is rejected without writing.
        let mut tiny = vec![0.0f32; 4];
        assert_eq!(
            recon_render_depth(grid, cam, 64, 1.5, 4.5, tiny.as_mut_ptr(), tiny.len()),
            ReconStatus::InvalidArgument
        );

        recon_camera_free(cam);
        recon_grid_free(grid);
    }
}

#[test]
fn cloud_chamfer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = recon_core::eval::PointCloud {
        points: vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)],
        colors: None,
    };
    let b = recon_core::eval::PointCloud {
        points: vec![Vector3::new(0.0, 0.5, 0.0), Vector3::new(1.0, 0.5, 0.0)],
        colors: None,
    };
    let pa = dir.path().join("a.ply");
    let pb = dir.path().join("b.ply");
    recon_core::io::write_ply(&pa, &a).unwrap();
    recon_core::io::write_ply(&pb, &b).unwrap();
    unsafe {
        let mut ca: *mut ReconCloud = ptr::null_mut();
        let mut cb: *mut ReconCloud = ptr::null_mut();
        assert_eq!(recon_cloud_load(c_path(&pa).as_ptr(), &mut ca), ReconStatus::Ok);
        assert_eq!(recon_cloud_load(c_path(&pb).as_ptr(), &mut cb), ReconStatus::Ok);
        assert_eq!(recon_cloud_len(ca), 2);

        let (mut acc, mut comp, mut mean) = (0.0f64, 0.0, 0.0);
        assert_eq!(
            recon_chamfer(ca, cb, &mut acc, &mut comp, &mut mean),
            ReconStatus::Ok
        );
        assert!((acc - 0.5).abs() < 1e-12);
        assert!((comp - 0.5).abs() < 1e-12);
        assert!((mean - 0.5).abs() < 1e-12);

        recon_cloud_free(ca);
        recon_cloud_free(cb);
    }
}

#[test]
fn errors_set_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        // Missing file.
        let mut grid: *mut ReconGrid = ptr::null_mut();
        let missing = c_path(&dir.path().join("nope.sdfg"));
        assert_eq!(
            recon_grid_load(missing.as_ptr(), &mut grid),
            ReconStatus::IoError
        );
        assert!(grid.is_null());
        let msg = CStr::from_ptr(recon_last_error()).to_str().unwrap();
        assert!(!msg.is_empty());

        // Corrupt magic.
        let bad = dir.path().join("bad.sdfg");
        std::fs::write(&bad, b"JUNKJUNKJUNK").unwrap();
        assert_eq!(
            recon_grid_load(c_path(&bad).as_ptr(), &mut grid),
            ReconStatus::IoError
        );
        let msg = CStr::from_ptr(recon_last_error()).to_str().unwrap();
        assert!(msg.contains("magic"), "message: {msg}");

        // Null arguments.
        assert_eq!(
            recon_grid_load(ptr::null(), &mut grid),
            ReconStatus::InvalidArgument
        );
        assert_eq!(
            recon_grid_load(missing.as_ptr(), ptr::null_mut()),
            ReconStatus::InvalidArgument
        );
        let mut sdf = 0.0;
        assert_eq!(
            recon_grid_sdf_at(ptr::null(), 0.0, 0.0, 0.0, &mut sdf),
            ReconStatus::InvalidArgument
        );
        assert!(recon_grid_beta(ptr::null()).is_nan());
        assert_eq!(recon_cloud_len(ptr::null()), 0);

        // Frees tolerate null.
        recon_grid_free(ptr::null_mut());
        recon_camera_free(ptr::null_mut());
        recon_cloud_free(ptr::null_mut());
    }
}

#[test]
fn generated_header_exposes_the_api() {
    // The build script writes include/recon.h next to the crate; the
    // header must declare every exported symbol.
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/recon.h");
    let text = std::fs::read_to_string(&header).expect("header should be generated");
    for sym in [
        "recon_last_error",
        "recon_grid_load",
        "recon_grid_free",
        "recon_grid_resolution",
        "recon_grid_beta",
        "recon_grid_sdf_at",
        "recon_camera_load",
        "recon_camera_free",
        "recon_camera_size",
        "recon_render_depth",
        "recon_cloud_load",
        "recon_cloud_free",
        "recon_cloud_len",
        "recon_chamfer",
        "RECON_STATUS_OK",
        "RECON_STATUS_INVALID_ARGUMENT",
    ] {
        assert!(text.contains(sym), "header is missing {sym}");
    }
    // Handles stay opaque: no struct fields leak into the header.
    assert!(text.contains("typedef struct ReconGrid ReconGrid;"));
    assert!(text.contains("typedef struct ReconCamera ReconCamera;"));
}
