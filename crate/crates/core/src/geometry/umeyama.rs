use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Sim3;

/// Least-squares similarity with `dst_i ≈ s R src_i + t`.
///
/// With `with_scale == false` the scale is pinned to 1.
pub fn umeyama_sim3(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<Sim3> {
    if src.len() != dst.len() {
        return Err(Error::InvalidInput(format!(
            "point lists differ in length: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: src.len(),
        });
    }
    let n = src.len() as f64;
    let mu_s = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mu_d = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let cs = s - mu_s;
        let cd = d - mu_d;
        cov += cd * cs.transpose();
        scatter += cs * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= n;
    var_s /= n;

    let ev = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = ev.iter().cloned().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::DegenerateGeometry(
            "source points are collinear or coincident".into(),
        ));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("u");
    let vt = svd.v_t.expect("v_t");
    let mut d = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let s = if with_scale {
        let trace_ds: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
        trace_ds / var_s
    } else {
        1.0
    };
    let t = mu_d - s * r * mu_s;
    Ok(Sim3::new(s, r, t))
}
