//! Deterministic 2-D PCA projection for plot-ready embedding dumps.

use uem_core::diffkit::Tensor;

/// Project rows onto the top two principal components. Power iteration with
/// deflation on the column-centered data; fully deterministic (fixed init,
/// fixed iteration count).
pub fn project_2d(data: &Tensor) -> Vec<(f64, f64)> {
    let (n, d) = (data.rows(), data.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(data.row(i)) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            data.row(i)
                .iter()
                .zip(mean.iter())
                .map(|(v, m)| v - m)
                .collect()
        })
        .collect();

    let mut components: Vec<Vec<f64>> = Vec::new();
    for c in 0..2.min(d) {
        let mut v = vec![0.0; d];
        // Deterministic start: a unit vector tilted off-axis.
        for (j, x) in v.iter_mut().enumerate() {
            *x = 1.0 + (j as f64 + 1.0) * 0.01 + c as f64 * 0.1;
        }
        normalize(&mut v);
        for _ in 0..200 {
            // w = Cov v (up to scale): X^T (X v)
            let mut xv = vec![0.0; n];
            for (i, row) in centered.iter().enumerate() {
                let mut s = 0.0;
                for j in 0..d {
                    s += row[j] * v[j];
                }
                xv[i] = s;
            }
            let mut w = vec![0.0; d];
            for (i, row) in centered.iter().enumerate() {
                for j in 0..d {
                    w[j] += row[j] * xv[i];
                }
            }
            for prev in &components {
                let dot: f64 = w.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
                for (x, p) in w.iter_mut().zip(prev.iter()) {
                    *x -= dot * p;
                }
            }
            if normalize(&mut w) < 1e-300 {
                break;
            }
            v = w;
        }
        components.push(v);
    }

    centered
        .iter()
        .map(|row| {
            let px: f64 = row.iter().zip(components[0].iter()).map(|(a, b)| a * b).sum();
            let py: f64 = if components.len() > 1 {
                row.iter().zip(components[1].iter()).map(|(a, b)| a * b).sum()
            } else {
                0.0
            };
            (px, py)
        })
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_the_dominant_axis() {
        // Points stretched along (1, 1, 0): first component aligns with it.
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let t = (i as f64 - 25.0) * 2.0;
                vec![t + 0.01 * (i as f64).sin(), t, 0.1 * (i as f64 * 0.7).cos()]
            })
            .collect();
        let data = Tensor::from_rows(&rows).unwrap();
        let proj = project_2d(&data);
        // Projection spreads along the first axis far more than the second.
        let spread = |sel: fn(&(f64, f64)) -> f64| {
            let vals: Vec<f64> = proj.iter().map(sel).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        };
        assert!(spread(|p| p.0) > 10.0 * spread(|p| p.1));
    }

    #[test]
    fn projection_is_deterministic() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![i as f64, (i * i) as f64 * 0.1, 1.0])
            .collect();
        let data = Tensor::from_rows(&rows).unwrap();
        let a = project_2d(&data);
        let b = project_2d(&data);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.0.to_bits(), y.0.to_bits());
            assert_eq!(x.1.to_bits(), y.1.to_bits());
        }
    }
}
