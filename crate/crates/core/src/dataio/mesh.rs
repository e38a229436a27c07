use rand::Rng;

use super::PointCloud;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt()
}

/// Draws `n` points uniformly over the surface of a triangle mesh.
///
/// Triangles are picked with probability proportional to area; inside a
/// triangle `(u, v) ~ U(0,1)²` is reflected when `u + v > 1`, giving
/// `p = a + u·(b − a) + v·(c − a)`.
pub fn sample_mesh<T: Scalar, R: Rng + ?Sized>(
    vertices: &[[f64; 3]],
    triangles: &[[usize; 3]],
    n: usize,
    rng: &mut R,
) -> Result<PointCloud<T>> {
    if n == 0 {
        return Err(Error::Geometry("cannot sample zero points".into()));
    }
    let mut cumulative = Vec::with_capacity(triangles.len());
    let mut total = 0.0;
    for (t, tri) in triangles.iter().enumerate() {
        if let Some(&bad) = tri.iter().find(|&&v| v >= vertices.len()) {
            return Err(Error::Geometry(format!(
                "triangle {t} references vertex {bad} of {}",
                vertices.len()
            )));
        }
        total += triangle_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
        cumulative.push(total);
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Geometry("mesh has zero total area".into()));
    }
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let pick = rng.random::<f64>() * total;
        // first triangle whose cumulative area exceeds the draw; zero-area
        // triangles share their predecessor's prefix and are never chosen
        let t = cumulative
            .partition_point(|&c| c <= pick)
            .min(triangles.len() - 1);
        let [a, b, c] = triangles[t].map(|v| vertices[v]);
        let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        for k in 0..3 {
            data.push(T::lit(a[k] + u * (b[k] - a[k]) + v * (c[k] - a[k])));
        }
    }
    PointCloud::new(3, data)
}
