//! C ABI over the reconstruction library: opaque handles for grids,
//! cameras, and point clouds, status codes for every fallible call, and
//! a thread-local last-error message.
//!
//! Every `*_load` call allocates a handle the caller must release with
//! the matching `*_free`; passing null where a handle is required
//! returns `RECON_STATUS_INVALID_ARGUMENT`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

use recon_core::camera::Camera;
use recon_core::eval::{chamfer, PointCloud};
use recon_core::io::{read_json, read_ply, read_sdfg};
use recon_core::sdf::{render_depth_map, sample_grid, VoxelSdfGrid};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconStatus {
    /// Success.
    Ok = 0,
    /// A null handle, null buffer, or out-of-range argument.
    InvalidArgument = 1,
    /// The file could not be read or parsed.
    IoError = 2,
    /// The operation itself failed.
    RuntimeError = 3,
}

use ReconStatus::{InvalidArgument, IoError, Ok as StatusOk, RuntimeError};

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Message describing the most recent failure on this thread. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn recon_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `path` must be a valid NUL-terminated string.
unsafe fn path_from_c(path: *const c_char) -> Option<PathBuf> {
    if path.is_null() {
        return None;
    }
    let s = unsafe { CStr::from_ptr(path) }.to_str().ok()?;
    Some(PathBuf::from(s))
}

/// Opaque trained voxel-SDF grid.
pub struct ReconGrid(VoxelSdfGrid);

/// Opaque pinhole camera.
pub struct ReconCamera(Camera);

/// Opaque point cloud.
pub struct ReconCloud(PointCloud);

/// Load a grid checkpoint (`.sdfg`) from disk.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn recon_grid_load(
    path: *const c_char,
    out: *mut *mut ReconGrid,
) -> ReconStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return InvalidArgument;
    }
    let Some(p) = (unsafe { path_from_c(path) }) else {
        set_error("path is null or not UTF-8");
        return InvalidArgument;
    };
    match read_sdfg(&p) {
        Ok(grid) => {
            unsafe { *out = Box::into_raw(Box::new(ReconGrid(grid))) };
            StatusOk
        }
        Err(e) => {
            set_error(e.to_string());
            IoError
        }
    }
}

/// Release a grid handle. Null is ignored.
///
/// # Safety
/// `grid` must come from `recon_grid_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn recon_grid_free(grid: *mut ReconGrid) {
    if !grid.is_null() {
        drop(unsafe { Box::from_raw(grid) });
    }
}

/// Grid resolution (vertices per axis).
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn recon_grid_resolution(
    grid: *const ReconGrid,
    nx: *mut u32,
    ny: *mut u32,
    nz: *mut u32,
) -> ReconStatus {
    if grid.is_null() || nx.is_null() || ny.is_null() || nz.is_null() {
        set_error("null pointer");
        return InvalidArgument;
    }
    let g = unsafe { &(*grid).0 };
    unsafe {
        *nx = g.nx as u32;
        *ny = g.ny as u32;
        *nz = g.nz as u32;
    }
    StatusOk
}

/// Density scale beta of the grid.
///
/// # Safety
/// `grid` must be a valid handle (null returns NaN).
#[no_mangle]
pub unsafe extern "C" fn recon_grid_beta(grid: *const ReconGrid) -> f64 {
    if grid.is_null() {
        return f64::NAN;
    }
    unsafe { &(*grid).0 }.beta
}

/// Trilinearly interpolated signed distance at a world point. Points
/// outside the grid bounds return the forced exterior value.
///
/// # Safety
/// `grid` and `out_sdf` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn recon_grid_sdf_at(
    grid: *const ReconGrid,
    x: f64,
    y: f64,
    z: f64,
    out_sdf: *mut f64,
) -> ReconStatus {
    if grid.is_null() || out_sdf.is_null() {
        set_error("null pointer");
        return InvalidArgument;
    }
    let g = unsafe { &(*grid).0 };
    let s = sample_grid(g, &nalgebra::Vector3::new(x, y, z));
    unsafe { *out_sdf = s.sdf };
    StatusOk
}

/// Load a camera from its JSON description.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn recon_camera_load(
    path: *const c_char,
    out: *mut *mut ReconCamera,
) -> ReconStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return InvalidArgument;
    }
    let Some(p) = (unsafe { path_from_c(path) }) else {
        set_error("path is null or not UTF-8");
        return InvalidArgument;
    };
    let value: serde_json::Value = match read_json(&p) {
        Ok(v) => v,
        Err(e) => {
            set_error(e.to_string());
            return IoError;
        }
    };
    match Camera::from_json(&value) {
        Ok(cam) => {
            unsafe { *out = Box::into_raw(Box::new(ReconCamera(cam))) };
            StatusOk
        }
        Err(e) => {
            set_error(e.to_string());
            IoError
        }
    }
}

/// Release a camera handle. Null is ignored.
///
/// # Safety
/// `camera` must come from `recon_camera_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn recon_camera_free(camera: *mut ReconCamera) {
    if !camera.is_null() {
        drop(unsafe { Box::from_raw(camera) });
    }
}

/// Image size of a camera.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn recon_camera_size(
    camera: *const ReconCamera,
    width: *mut u32,
    height: *mut u32,
) -> ReconStatus {
    if camera.is_null() || width.is_null() || height.is_null() {
        set_error("null pointer");
        return InvalidArgument;
    }
    let c = unsafe { &(*camera).0 };
    unsafe {
        *width = c.width as u32;
        *height = c.height as u32;
    }
    StatusOk
}

/// Render an expected-depth map from the grid into `out_depth`
/// (row-major, `width * height` floats; invalid pixels are 0).
///
/// # Safety
/// `out_depth` must point to at least `len` floats.
#[no_mangle]
pub unsafe extern "C" fn recon_render_depth(
    grid: *const ReconGrid,
    camera: *const ReconCamera,
    n_samples: u32,
    depth_min: f64,
    depth_max: f64,
    out_depth: *mut f32,
    len: usize,
) -> ReconStatus {
    if grid.is_null() || camera.is_null() || out_depth.is_null() {
        set_error("null pointer");
        return InvalidArgument;
    }
    let g = unsafe { &(*grid).0 };
    let c = unsafe { &(*camera).0 };
    if len < c.width * c.height {
        set_error(format!(
            "buffer holds {len} values, camera needs {}",
            c.width * c.height
        ));
        return InvalidArgument;
    }
    if !(depth_min > 0.0 && depth_max > depth_min) || n_samples < 8 {
        set_error("need 0 < depth_min < depth_max and at least 8 samples");
        return InvalidArgument;
    }
    let (depth, _) = render_depth_map(g, c, n_samples as usize, [depth_min, depth_max]);
    let out = unsafe { std::slice::from_raw_parts_mut(out_depth, c.width * c.height) };
    for (o, &v) in out.iter_mut().zip(&depth.values) {
        *o = v as f32;
    }
    StatusOk
}

/// Load a binary PLY point cloud.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn recon_cloud_load(
    path: *const c_char,
    out: *mut *mut ReconCloud,
) -> ReconStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return InvalidArgument;
    }
    let Some(p) = (unsafe { path_from_c(path) }) else {
        set_error("path is null or not UTF-8");
        return InvalidArgument;
    };
    match read_ply(&p) {
        Ok(cloud) => {
            unsafe { *out = Box::into_raw(Box::new(ReconCloud(cloud))) };
            StatusOk
        }
        Err(e) => {
            set_error(e.to_string());
            IoError
        }
    }
}

/// Release a point-cloud handle. Null is ignored.
///
/// # Safety
/// `cloud` must come from `recon_cloud_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn recon_cloud_free(cloud: *mut ReconCloud) {
    if !cloud.is_null() {
        drop(unsafe { Box::from_raw(cloud) });
    }
}

/// Number of points in a cloud (0 for a null handle).
///
/// # Safety
/// `cloud` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn recon_cloud_len(cloud: *const ReconCloud) -> usize {
    if cloud.is_null() {
        return 0;
    }
    unsafe { &(*cloud).0 }.len()
}

/// Symmetric Chamfer distance between two clouds: accuracy (a -> b),
/// completeness (b -> a), and their mean.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn recon_chamfer(
    a: *const ReconCloud,
    b: *const ReconCloud,
    out_accuracy: *mut f64,
    out_completeness: *mut f64,
    out_mean: *mut f64,
) -> ReconStatus {
    if a.is_null()
        || b.is_null()
        || out_accuracy.is_null()
        || out_completeness.is_null()
        || out_mean.is_null()
    {
        set_error("null pointer");
        return InvalidArgument;
    }
    let ca = unsafe { &(*a).0 };
    let cb = unsafe { &(*b).0 };
    match chamfer(ca, cb, None) {
        Ok(report) => {
            unsafe {
                *out_accuracy = report.accuracy;
                *out_completeness = report.completeness;
                *out_mean = report.mean;
            }
            StatusOk
        }
        Err(e) => {
            set_error(e.to_string());
            RuntimeError
        }
    }
}
