use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Labelled sample set `S = ((x_1, y_1), …, (x_m, y_m))` with `y_i ∈ {−1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    samples: Array2<T>,
    labels: Vec<T>,
}

impl<T: Scalar> Dataset<T> {
    /// `samples` is `m × d`, one row per point.
    pub fn new(samples: Array2<T>, labels: Vec<T>) -> Result<Self> {
        if samples.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples but {} labels",
                samples.nrows(),
                labels.len()
            )));
        }
        if let Some(i) = labels
            .iter()
            .position(|&y| y != T::one() && y != -T::one())
        {
            return Err(Error::Dataset {
                line: i + 1,
                message: "label must be -1 or +1".into(),
            });
        }
        Ok(Self { samples, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: &[f64]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::Dataset {
                    line: i + 1,
                    message: format!("expected {d} features, found {}", r.len()),
                });
            }
            flat.extend(r.iter().map(|&v| T::of(v)));
        }
        let samples = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(samples, labels.iter().map(|&y| T::of(y)).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn samples(&self) -> &Array2<T> {
        &self.samples
    }

    pub fn labels(&self) -> &[T] {
        &self.labels
    }

    pub fn x(&self, i: usize) -> ArrayView1<'_, T> {
        self.samples.row(i)
    }

    pub fn y(&self, i: usize) -> T {
        self.labels[i]
    }

    /// `max_i ‖x_i‖₂`.
    pub fn radius(&self) -> T {
        self.samples
            .axis_iter(Axis(0))
            .map(|r| r.dot(&r).sqrt())
            .fold(T::zero(), T::max)
    }

    /// Fails if any sample lies outside the ball of the given radius.
    pub fn check_radius(&self, radius: T) -> Result<()> {
        for (i, r) in self.samples.axis_iter(Axis(0)).enumerate() {
            if r.dot(&r).sqrt() > radius {
                return Err(Error::Dataset {
                    line: i + 1,
                    message: format!("sample norm exceeds declared radius {radius}"),
                });
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: self.samples.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ArrayView1<'_, T>, T)> {
        self.samples
            .axis_iter(Axis(0))
            .zip(self.labels.iter().copied())
    }

    pub fn row_owned(&self, i: usize) -> Array1<T> {
        self.samples.row(i).to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_and_subset() {
        let d = Dataset::<f64>::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0]], &[1.0, -1.0]).unwrap();
        assert_eq!(d.radius(), 5.0);
        assert!(d.check_radius(5.0).is_ok());
        assert!(d.check_radius(4.9).is_err());
        let s = d.subset(&[1]);
        assert_eq!(s.len(), 1);
        assert_eq!(s.y(0), -1.0);
    }

    #[test]
    fn bad_label_rejected() {
        assert!(Dataset::<f64>::from_rows(&[vec![1.0]], &[0.0]).is_err());
        assert!(Dataset::<f64>::from_rows(&[vec![1.0], vec![1.0, 2.0]], &[1.0, 1.0]).is_err());
    }
}
