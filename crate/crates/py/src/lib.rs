//! Python bindings: poses, descriptors, preprocessing, evaluation, the
//! synthetic generator and whole-system runs.

use std::path::PathBuf;

use nalgebra::{Matrix3, Vector3, Vector6};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use thermoslam::evalsim::{compute_metrics, write_dataset, AlignMode, CircleScenario, Trajectory};
use thermoslam::features::{self, BinaryDescriptor, DetectorParams, DESC_BYTES};
use thermoslam::geometry::PoseSE3;
use thermoslam::pipeline::{run_best_of, write_outputs, DiskDataset, FrameSource, PipelineConfig};
use thermoslam::preproc::{self, ClaheParams, PreprocFrame};
use thermoslam::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::InvalidInput(_) | Error::Parse { .. } | Error::Ingestion(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_align(s: &str) -> PyResult<AlignMode> {
    match s {
        "none" => Ok(AlignMode::None),
        "se3" => Ok(AlignMode::SE3),
        "sim3" => Ok(AlignMode::Sim3),
        _ => Err(PyValueError::new_err(format!("unknown alignment '{s}'"))),
    }
}

fn descriptor(b: &[u8]) -> PyResult<BinaryDescriptor> {
    let arr: [u8; DESC_BYTES] = b
        .try_into()
        .map_err(|_| PyValueError::new_err(format!("descriptor must be {DESC_BYTES} bytes, got {}", b.len())))?;
    Ok(BinaryDescriptor(arr))
}

/// Rigid transform. Poses in the system are world-to-camera.
#[pyclass(name = "Pose", module = "thermoslam_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPose(PoseSE3);

#[pymethods]
impl PyPose {
    #[new]
    #[pyo3(signature = (rotation=None, translation=None))]
    fn new(rotation: Option<[[f64; 3]; 3]>, translation: Option<[f64; 3]>) -> PyResult<Self> {
        let r = rotation.map_or_else(Matrix3::identity, |r| Matrix3::from_fn(|i, j| r[i][j]));
        let t = translation.map_or_else(Vector3::zeros, Vector3::from);
        let p = PoseSE3::new(r, t);
        if !p.is_valid(1e-6) {
            return Err(PyValueError::new_err("rotation is not orthonormal"));
        }
        Ok(Self(p))
    }

    /// From a tangent vector (rotation part first).
    #[staticmethod]
    fn exp(xi: [f64; 6]) -> Self {
        Self(PoseSE3::exp(&Vector6::from(xi)))
    }

    fn log(&self) -> [f64; 6] {
        self.0.log().into()
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn compose(&self, other: &PyPose) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn __matmul__(&self, other: &PyPose) -> Self {
        self.compose(other)
    }

    fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.transform(&Vector3::from(p)).into()
    }

    fn matrix(&self) -> [[f64; 4]; 4] {
        let m = self.0.to_matrix();
        std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        self.0.translation.into()
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.0.center().into()
    }

    fn __repr__(&self) -> String {
        let t = self.0.translation;
        format!("Pose(t=[{:.4}, {:.4}, {:.4}])", t.x, t.y, t.z)
    }
}

#[pyfunction]
fn hamming(a: &[u8], b: &[u8]) -> PyResult<u32> {
    Ok(features::hamming(&descriptor(a)?, &descriptor(b)?))
}

/// Mutual nearest neighbours between two descriptor lists.
#[pyfunction]
#[pyo3(signature = (a, b, max_distance=64))]
fn match_descriptors(a: Vec<Vec<u8>>, b: Vec<Vec<u8>>, max_distance: u32) -> PyResult<Vec<(usize, usize, u32)>> {
    let a: Vec<_> = a.iter().map(|d| descriptor(d)).collect::<PyResult<_>>()?;
    let b: Vec<_> = b.iter().map(|d| descriptor(d)).collect::<PyResult<_>>()?;
    Ok(features::match_mutual_nn(&a, &b, max_distance))
}

#[pyfunction]
#[pyo3(signature = (pixels, width, height, clip_limit=3.0, tiles=(8, 8)))]
fn clahe<'py>(py: Python<'py>, pixels: &[u8], width: usize, height: usize, clip_limit: f64, tiles: (usize, usize)) -> PyResult<Bound<'py, PyBytes>> {
    let frame = PreprocFrame::new(0.0, width, height, pixels.to_vec()).map_err(to_py)?;
    let params = ClaheParams {
        clip_limit,
        tile_cols: tiles.0,
        tile_rows: tiles.1,
    };
    let out = preproc::clahe(&frame, &params).map_err(to_py)?;
    Ok(PyBytes::new(py, &out.data))
}

/// Keypoints `(u, v, score)` and packed binary descriptors of an 8-bit image.
#[pyfunction]
#[pyo3(signature = (pixels, width, height, max_points=1000))]
fn detect<'py>(py: Python<'py>, pixels: &[u8], width: usize, height: usize, max_points: usize) -> PyResult<(Vec<(f32, f32, f32)>, Vec<Bound<'py, PyBytes>>)> {
    let frame = PreprocFrame::new(0.0, width, height, pixels.to_vec()).map_err(to_py)?;
    let params = DetectorParams {
        max_points,
        ..DetectorParams::default()
    };
    let fs = py.detach(|| features::detect_features(&frame, &params));
    let kps = fs.keypoints.iter().map(|k| (k.u, k.v, k.score)).collect();
    let bins = fs.binary.iter().map(|b| PyBytes::new(py, &b.0)).collect();
    Ok((kps, bins))
}

fn report_dict<'py>(py: Python<'py>, est: &Trajectory, gt: &Trajectory, align: AlignMode) -> PyResult<Bound<'py, PyDict>> {
    let m = compute_metrics(est, gt, align).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("ate_rmse", m.ate_rmse)?;
    d.set_item("t_apm", m.t_apm)?;
    d.set_item("cr", m.cr)?;
    d.set_item("associated", m.associated)?;
    d.set_item("gt_length", m.gt_length)?;
    d.set_item("scale", m.alignment.scale)?;
    Ok(d)
}

/// ATE-RMSE, t_apm and completion ratio of two TUM trajectory files.
#[pyfunction]
#[pyo3(signature = (estimate, ground_truth, align="sim3"))]
fn evaluate<'py>(py: Python<'py>, estimate: PathBuf, ground_truth: PathBuf, align: &str) -> PyResult<Bound<'py, PyDict>> {
    let mode = parse_align(align)?;
    let est = Trajectory::load(&estimate).map_err(to_py)?;
    let gt = Trajectory::load(&ground_truth).map_err(to_py)?;
    report_dict(py, &est, &gt, mode)
}

/// Writes a synthetic dataset; `scenario` is TOML text. Returns the frame count.
#[pyfunction]
#[pyo3(signature = (out, seed=0, scenario=None))]
fn simulate(py: Python<'_>, out: PathBuf, seed: u64, scenario: Option<&str>) -> PyResult<usize> {
    let sc = scenario.map_or_else(|| Ok(CircleScenario::default()), CircleScenario::parse).map_err(to_py)?;
    py.detach(|| {
        let world = sc.build(seed)?;
        write_dataset(&world, seed, &out)?;
        Ok(world.len())
    })
    .map_err(to_py)
}

/// The default configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    PipelineConfig::default().to_toml()
}

/// Runs the system over a dataset directory. The result holds the run
/// manifest fields, the camera-to-world trajectory as `(t, Pose, tracked)`
/// and, when the dataset has ground truth, a `metrics` dict.
#[pyfunction]
#[pyo3(signature = (dataset, config=None, out=None))]
fn run_slam<'py>(py: Python<'py>, dataset: PathBuf, config: Option<&str>, out: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.map_or_else(|| Ok(PipelineConfig::default()), PipelineConfig::parse).map_err(to_py)?;
    let data = DiskDataset::open(&dataset).map_err(to_py)?;
    let inputs = vec![dataset.display().to_string()];
    let (res, cfg) = py.detach(|| run_best_of(&data, &cfg, inputs));
    if let Some(dir) = &out {
        write_outputs(dir, &res).map_err(to_py)?;
    }
    let m = &res.manifest;
    let d = PyDict::new(py);
    d.set_item("status", &m.status)?;
    d.set_item("error", &m.error)?;
    d.set_item("frames", m.frames)?;
    d.set_item("tracked_frames", m.tracked_frames)?;
    d.set_item("keyframes", m.keyframes)?;
    d.set_item("map_points", m.map_points)?;
    d.set_item("loop_closures", m.loop_closures)?;
    d.set_item("relocalizations", m.relocalizations)?;
    d.set_item("config_hash", &m.config_hash)?;
    let traj: Vec<(f64, PyPose, bool)> = res.trajectory.poses.iter().map(|s| (s.timestamp, PyPose(s.pose), s.tracked)).collect();
    d.set_item("trajectory", traj)?;
    // a failed run may leave too few poses to score; the manifest says why
    if let Some(gt) = data.ground_truth() {
        if let Ok(m) = report_dict(py, &res.trajectory, &gt, cfg.eval.align.into()) {
            d.set_item("metrics", m)?;
        }
    }
    Ok(d)
}

#[pymodule]
fn thermoslam_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_function(wrap_pyfunction!(hamming, m)?)?;
    m.add_function(wrap_pyfunction!(match_descriptors, m)?)?;
    m.add_function(wrap_pyfunction!(clahe, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_slam, m)?)?;
    m.add("DESCRIPTOR_BYTES", DESC_BYTES)?;
    Ok(())
}
