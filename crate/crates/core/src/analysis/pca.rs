use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PCA_TOL: f64 = 1e-9;
pub const PCA_MAX_ITER: usize = 10_000;

/// Points projected onto their top two principal directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance along each direction, non-increasing.
    pub explained: [f64; 2],
    pub components: [Vec<f64>; 2],
}

impl Projection {
    /// CSV `label,x,y` with one row per point.
    pub fn to_csv(&self, labels: &[String]) -> Result<String> {
        if labels.len() != self.coords.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} points",
                labels.len(),
                self.coords.len()
            )));
        }
        let mut out = String::from("label,x,y\n");
        for (l, [x, y]) in labels.iter().zip(&self.coords) {
            out.push_str(&format!("{l},{x:.6},{y:.6}\n"));
        }
        Ok(out)
    }
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let h = v.len();
    (0..h)
        .map(|i| {
            m[i * h..(i + 1) * h]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn orient(v: &mut [f64]) {
    let lead = v.iter().copied().fold(
        0.0f64,
        |best, x| if x.abs() > best.abs() { x } else { best },
    );
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Leading eigenpair of a symmetric PSD matrix, or `None` if it is zero.
fn power_iteration(cov: &[f64], h: usize, scale: f64) -> Option<(f64, Vec<f64>)> {
    // start from the largest column so the start is never orthogonal to the range
    let (start, col_norm) = (0..h)
        .map(|j| {
            let col: Vec<f64> = (0..h).map(|i| cov[i * h + j]).collect();
            let n = norm(&col);
            (col, n)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    if col_norm <= scale * 1e-14 {
        return None;
    }
    let mut v: Vec<f64> = start.iter().map(|x| x / col_norm).collect();
    for _ in 0..PCA_MAX_ITER {
        let w = mat_vec(cov, &v);
        let n = norm(&w);
        if n <= scale * 1e-14 {
            return None;
        }
        let w: Vec<f64> = w.iter().map(|x| x / n).collect();
        let diff = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        v = w;
        if diff < PCA_TOL {
            break;
        }
    }
    let lambda = v
        .iter()
        .zip(mat_vec(cov, &v))
        .map(|(a, b)| a * b)
        .sum::<f64>();
    orient(&mut v);
    Some((lambda.max(0.0), v))
}

/// Any unit vector orthogonal to `u`.
fn orthogonal_to(u: &[f64]) -> Vec<f64> {
    let h = u.len();
    (0..h)
        .map(|j| {
            let mut e = vec![0.0; h];
            e[j] = 1.0;
            let d = u[j];
            e.iter_mut().zip(u).for_each(|(x, ui)| *x -= d * ui);
            e
        })
        .max_by(|a, b| norm(a).total_cmp(&norm(b)))
        .map(|e| {
            let n = norm(&e);
            e.into_iter().map(|x| x / n).collect()
        })
        .unwrap_or_default()
}

/// Mean-centers `points` (`[N, H]`) and projects them onto the top two
/// principal directions found by power iteration with deflation.
pub fn pca_project_2d<T: Scalar>(points: &Tensor<T>) -> Result<Projection> {
    let shape = points.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "expected a matrix, got shape {shape:?}"
        )));
    }
    let (n, h) = (shape[0], shape[1]);
    if n < 3 {
        return Err(Error::Data(format!("PCA needs at least 3 points, got {n}")));
    }
    if h < 2 {
        return Err(Error::Shape(format!(
            "PCA to 2-D needs at least 2 dimensions, got {h}"
        )));
    }
    let x: Vec<f64> = points.data().iter().map(|v| v.as_f64()).collect();
    let mut mean = vec![0.0; h];
    for row in x.chunks(h) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = x
        .chunks(h)
        .flat_map(|row| {
            row.iter()
                .zip(&mean)
                .map(|(v, m)| v - m)
                .collect::<Vec<_>>()
        })
        .collect();
    let mut cov = vec![0.0; h * h];
    for row in centered.chunks(h) {
        for i in 0..h {
            for j in i..h {
                cov[i * h + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..h {
        for j in i..h {
            let v = cov[i * h + j] / (n - 1) as f64;
            cov[i * h + j] = v;
            cov[j * h + i] = v;
        }
    }
    let trace: f64 = (0..h).map(|i| cov[i * h + i]).sum();
    if trace <= 0.0 {
        return Err(Error::Degenerate("all points are identical".into()));
    }
    let (l1, v1) = power_iteration(&cov, h, trace)
        .ok_or_else(|| Error::Degenerate("all points are identical".into()))?;
    for i in 0..h {
        for j in 0..h {
            cov[i * h + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (l2, v2) = match power_iteration(&cov, h, trace) {
        Some((l, mut v)) => {
            // re-orthogonalize against numerical drift
            let d: f64 = v.iter().zip(&v1).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(&v1).for_each(|(x, u)| *x -= d * u);
            let nv = norm(&v);
            if nv > 0.0 {
                v.iter_mut().for_each(|x| *x /= nv);
                (l.min(l1), v)
            } else {
                (0.0, orthogonal_to(&v1))
            }
        }
        None => (0.0, orthogonal_to(&v1)),
    };
    let coords = centered
        .chunks(h)
        .map(|row| {
            let a = row.iter().zip(&v1).map(|(x, u)| x * u).sum();
            let b = row.iter().zip(&v2).map(|(x, u)| x * u).sum();
            [a, b]
        })
        .collect();
    Ok(Projection {
        coords,
        explained: [l1, l2],
        components: [v1, v2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points_have_rank_one() {
        let pts = Tensor::new(
            vec![4, 3],
            vec![
                0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 2.0, 4.0, 6.0, -1.0, -2.0, -3.0,
            ],
        )
        .unwrap();
        let p = pca_project_2d(&pts).unwrap();
        assert!(p.explained[1] < 1e-10);
        assert!(p.explained[0] > 0.0);
    }

    #[test]
    fn axis_aligned_input_projects_to_itself() {
        // variance 10 along x, 1 along y, zero covariance
        let raw = [
            (-3.0, -1.0),
            (3.0, -1.0),
            (-3.0, 1.0),
            (3.0, 1.0),
            (0.0, 0.0),
        ];
        let data: Vec<f64> = raw.iter().flat_map(|&(x, y)| [x + 5.0, y - 2.0]).collect();
        let p = pca_project_2d(&Tensor::new(vec![5, 2], data).unwrap()).unwrap();
        for (c, &(x, y)) in p.coords.iter().zip(&raw) {
            assert!((c[0].abs() - f64::abs(x)).abs() < 1e-9);
            assert!((c[1].abs() - f64::abs(y)).abs() < 1e-9);
        }
        assert!((p.explained[0] - 9.0).abs() < 1e-9);
        assert!((p.explained[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_points_are_degenerate() {
        let pts = Tensor::new(vec![3, 2], vec![1.0f64; 6]).unwrap();
        assert!(matches!(pca_project_2d(&pts), Err(Error::Degenerate(_))));
    }
}
