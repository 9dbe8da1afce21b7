//! Input preprocessing: pixel normalization, pooling and the trigonometric
//! feature map.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// `(1/sqrt(m)) [cos(pi x_i / 2).., sin(pi x_i / 2)..]` for `x` of length `m`.
///
/// Entries outside `[0, 1]` are clamped; the number of clamped entries is
/// returned alongside the embedding. The result has unit Euclidean norm.
pub fn trig_embed(x: &[f64]) -> Result<(Vec<f64>, usize)> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let scale = 1.0 / (x.len() as f64).sqrt();
    let mut clamped = 0;
    let mut out = vec![0.0; 2 * x.len()];
    for (i, &v) in x.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::Parse(format!("NaN feature at position {i}")));
        }
        let c = v.clamp(0.0, 1.0);
        if c != v {
            clamped += 1;
        }
        let (s, co) = (FRAC_PI_2 * c).sin_cos();
        out[i] = scale * co;
        out[x.len() + i] = scale * s;
    }
    Ok((out, clamped))
}

/// Mean of each disjoint 2x2 block of a square, even-sided row-major image.
pub fn avg_pool_2x2(img: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows != cols || rows % 2 != 0 || rows == 0 {
        return Err(Error::BadImageSide { rows, cols });
    }
    if img.len() != rows * cols {
        return Err(Error::ShapeData {
            shape: vec![rows, cols],
            expected: rows * cols,
            actual: img.len(),
        });
    }
    let half = rows / 2;
    let mut out = Vec::with_capacity(half * half);
    for r in 0..half {
        for c in 0..half {
            let at = |dr: usize, dc: usize| img[(2 * r + dr) * cols + 2 * c + dc];
            out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
        }
    }
    Ok(out)
}

pub fn flatten_row_major(grid: &[Vec<f64>]) -> Vec<f64> {
    grid.iter().flatten().copied().collect()
}

/// Integer pixel intensities `0..=255` to `[0, 1]`.
pub fn normalize_pixels(img: &[i64]) -> Result<Vec<f64>> {
    img.iter()
        .enumerate()
        .map(|(index, &value)| {
            if (0..=255).contains(&value) {
                Ok(value as f64 / 255.0)
            } else {
                Err(Error::PixelRange { index, value })
            }
        })
        .collect()
}

/// Like [`normalize_pixels`] for real-valued input. With `already_unit`
/// set, values are checked to lie in `[0, 1]` and returned unchanged.
pub fn normalize_real(img: &[f64], already_unit: bool) -> Result<Vec<f64>> {
    let hi = if already_unit { 1.0 } else { 255.0 };
    let mut out = Vec::with_capacity(img.len());
    for (index, &v) in img.iter().enumerate() {
        if !(0.0..=hi).contains(&v) {
            return Err(Error::PixelRange { index, value: v as i64 });
        }
        out.push(if already_unit { v } else { v / 255.0 });
    }
    Ok(out)
}

/// Raw bytes to per-node trig features: normalize, 2x2 average pool, flatten,
/// then embed every pooled pixel on its own (two components per node).
pub fn image_to_nodes(pixels: &[u8], side: usize) -> Result<Vec<Vec<f64>>> {
    let unit: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let pooled = avg_pool_2x2(&unit, side, side)?;
    pooled.iter().map(|&p| trig_embed(&[p]).map(|(v, _)| v)).collect()
}

/// Per-feature min-max scaling fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyDataset)?.as_ref();
        let mut min = first.to_vec();
        let mut max = first.to_vec();
        for row in rows {
            let row = row.as_ref();
            if row.len() != min.len() {
                return Err(Error::ShapeMismatch(format!(
                    "row of {} features, expected {}",
                    row.len(),
                    min.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(Self { min, max })
    }

    /// Scales to `[0, 1]`, clamping values outside the fitted range. Constant
    /// features map to 0. Returns the scaled row and the clamp count.
    pub fn transform(&self, row: &[f64]) -> Result<(Vec<f64>, usize)> {
        if row.len() != self.min.len() {
            return Err(Error::ShapeMismatch(format!(
                "row of {} features, scaler fitted on {}",
                row.len(),
                self.min.len()
            )));
        }
        let mut clamped = 0;
        let out = row
            .iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| {
                let span = hi - lo;
                let s = if span > 0.0 { (v - lo) / span } else { 0.0 };
                let c = s.clamp(0.0, 1.0);
                if c != s {
                    clamped += 1;
                }
                c
            })
            .collect();
        Ok((out, clamped))
    }
}

/// How tabular features become model nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMap {
    /// One node per feature holding `trig_embed([x])` (two components).
    Trig,
    /// One node per feature holding `[x]`.
    Raw,
}

impl FeatureMap {
    pub fn node_dim(self) -> usize {
        match self {
            FeatureMap::Trig => 2,
            FeatureMap::Raw => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trig" => Ok(FeatureMap::Trig),
            "raw" => Ok(FeatureMap::Raw),
            other => Err(Error::Parse(format!("unknown feature map '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMap::Trig => "trig",
            FeatureMap::Raw => "raw",
        }
    }

    pub fn apply(self, row: &[f64]) -> Result<Vec<Vec<f64>>> {
        match self {
            FeatureMap::Trig => row.iter().map(|&v| trig_embed(&[v]).map(|(e, _)| e)).collect(),
            FeatureMap::Raw => Ok(row.iter().map(|&v| vec![v]).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-15, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn trig_examples() {
        close(&trig_embed(&[0.0]).unwrap().0, &[1.0, 0.0]);
        let h = 2f64.sqrt() / 2.0;
        close(&trig_embed(&[0.5]).unwrap().0, &[h, h]);
        close(&trig_embed(&[0.0, 1.0]).unwrap().0, &[h, 0.0, 0.0, h]);
        assert!(matches!(trig_embed(&[]), Err(Error::EmptyInput)));
        let (v, n) = trig_embed(&[1.5, -0.2, 0.3]).unwrap();
        assert_eq!(n, 2);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pooling_examples() {
        let constant = vec![0.7; 28 * 28];
        assert!(avg_pool_2x2(&constant, 28, 28).unwrap().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert_eq!(avg_pool_2x2(&[0.0, 0.0, 4.0, 8.0], 2, 2).unwrap(), vec![3.0]);
        let checker: Vec<f64> = (0..28 * 28).map(|i| ((i / 28 + i % 28) % 2) as f64).collect();
        let pooled = avg_pool_2x2(&checker, 28, 28).unwrap();
        assert_eq!(pooled.len(), 196);
        assert!(pooled.iter().all(|&v| v == 0.5));
        assert!(matches!(avg_pool_2x2(&[0.0; 9], 3, 3), Err(Error::BadImageSide { .. })));
        assert!(avg_pool_2x2(&[0.0; 8], 2, 4).is_err());
    }

    #[test]
    fn flatten_and_normalize() {
        assert_eq!(flatten_row_major(&[vec![1.0, 2.0], vec![3.0, 4.0]]), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flatten_row_major(&[vec![5.0, 6.0, 7.0]]), vec![5.0, 6.0, 7.0]);
        let grid = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let back: Vec<Vec<f64>> = flatten_row_major(&grid).chunks(3).map(<[f64]>::to_vec).collect();
        assert_eq!(back, grid);

        assert_eq!(normalize_pixels(&[0, 255, 51]).unwrap(), vec![0.0, 1.0, 0.2]);
        assert!(matches!(normalize_pixels(&[3, 256]), Err(Error::PixelRange { index: 1, value: 256 })));
        assert!(normalize_pixels(&[-1]).is_err());
        let unit = [0.0, 0.25, 1.0];
        assert_eq!(normalize_real(&unit, true).unwrap(), unit.to_vec());
        assert!(normalize_real(&[1.5], true).is_err());
        assert_eq!(normalize_real(&[51.0], false).unwrap(), vec![0.2]);
    }

    #[test]
    fn image_pipeline_gives_unit_nodes() {
        let pixels: Vec<u8> = (0..784).map(|i| (i * 37 % 256) as u8).collect();
        let nodes = image_to_nodes(&pixels, 28).unwrap();
        assert_eq!(nodes.len(), 196);
        for v in &nodes {
            assert_eq!(v.len(), 2);
            assert!((v[0] * v[0] + v[1] * v[1] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn scaler_clamps_unseen_values() {
        let sc = MinMaxScaler::fit(&[vec![0.0, 5.0, 1.0], vec![10.0, 5.0, 3.0]]).unwrap();
        let (v, n) = sc.transform(&[5.0, 5.0, 4.0]).unwrap();
        assert_eq!(v, vec![0.5, 0.0, 1.0]);
        assert_eq!(n, 1);
        assert!(sc.transform(&[1.0]).is_err());
        assert!(MinMaxScaler::fit::<Vec<f64>>(&[]).is_err());
        assert_eq!(FeatureMap::Trig.apply(&[0.0, 1.0]).unwrap().len(), 2);
        assert_eq!(FeatureMap::Raw.apply(&[0.3]).unwrap(), vec![vec![0.3]]);
    }

    proptest! {
        #[test]
        fn trig_is_unit_norm(x in proptest::collection::vec(0.0f64..=1.0, 1..20)) {
            let (v, n) = trig_embed(&x).unwrap();
            prop_assert_eq!(n, 0);
            let norm: f64 = v.iter().map(|a| a * a).sum();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }

        #[test]
        fn trig_is_lipschitz(x in proptest::collection::vec(0.0f64..=1.0, 1..8), k in 0usize..8, d in -0.5f64..0.5) {
            let k = k % x.len();
            let mut y = x.clone();
            y[k] = (y[k] + d).clamp(0.0, 1.0);
            let (a, _) = trig_embed(&x).unwrap();
            let (b, _) = trig_embed(&y).unwrap();
            let dist = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let bound = FRAC_PI_2 / (x.len() as f64).sqrt() * (x[k] - y[k]).abs();
            prop_assert!(dist <= bound + 1e-12);
        }
    }
}
