//! Elementwise ops, reductions and the two soft-selection primitives
//! (temperature softmax, log-sum-exp smooth max).

use super::{Float, Tensor};
use crate::error::{invalid, Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        if a.shape().len() != b.shape().len() {
            return Err(Error::Shape {
                op,
                dim: "rank",
                expected: a.shape().len(),
                got: b.shape().len(),
            });
        }
        let (&x, &y) = a
            .shape()
            .iter()
            .zip(b.shape())
            .find(|(x, y)| x != y)
            .expect("shapes differ");
        return Err(Error::Shape {
            op,
            dim: "axis",
            expected: x,
            got: y,
        });
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let a = self.to_vec();
        let b = other.to_vec();
        let data = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(g.iter().zip(&b).map(|(g, y)| g * y).collect()),
                    Some(g.iter().zip(&a).map(|(g, x)| g * x).collect()),
                ]
            }),
        ))
    }

    pub fn mul_scalar(&self, k: Float) -> Tensor {
        let data = self.data().iter().map(|v| v * k).collect();
        Tensor::from_op(
            "mul_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * k).collect())]),
        )
    }

    pub fn div_scalar(&self, k: Float) -> Tensor {
        let data = self.data().iter().map(|v| v / k).collect();
        Tensor::from_op(
            "div_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v / k).collect())]),
        )
    }

    pub fn add_scalar(&self, k: Float) -> Tensor {
        let data = self.data().iter().map(|v| v + k).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    pub fn relu(&self) -> Tensor {
        let x = self.to_vec();
        let data = x.iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(&x)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let y: Vec<Float> = self.data().iter().map(|v| v.exp()).collect();
        let saved = y.clone();
        Tensor::from_op(
            "exp",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().zip(&saved).map(|(g, y)| g * y).collect())]),
        )
    }

    /// Forward rounds up, backward passes the gradient through unchanged.
    pub fn ceil_ste(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.ceil()).collect();
        Tensor::from_op(
            "ceil_ste",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![s as Float],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        Tensor::from_op(
            "mean",
            vec![1],
            vec![(s / n as f64) as Float],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0] / n as Float; n])]),
        )
    }

    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        Ok(self.mul(other)?.sum())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                dim: "element count",
                expected: self.numel(),
                got: n,
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Multiplies every slice along the leading axis by the matching entry of `w`.
    pub fn scale_rows(&self, w: &Tensor) -> Result<Tensor> {
        let rows = self.shape()[0];
        if w.numel() != rows {
            return Err(Error::Shape {
                op: "scale_rows",
                dim: "rows",
                expected: rows,
                got: w.numel(),
            });
        }
        let inner = self.numel() / rows;
        let x = self.to_vec();
        let wv = w.to_vec();
        let data = x
            .chunks(inner)
            .zip(&wv)
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        Ok(Tensor::from_op(
            "scale_rows",
            self.shape().to_vec(),
            data,
            vec![self.clone(), w.clone()],
            Box::new(move |g| {
                let gx = g
                    .chunks(inner)
                    .zip(&wv)
                    .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
                    .collect();
                let gw = g
                    .chunks(inner)
                    .zip(x.chunks(inner))
                    .map(|(gr, xr)| {
                        gr.iter().zip(xr).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>()
                            as Float
                    })
                    .collect();
                vec![Some(gx), Some(gw)]
            }),
        ))
    }

    /// Column `j` of a matrix.
    pub fn select_column(&self, j: usize) -> Result<Tensor> {
        let [rows, cols] = self.matrix_dims("select_column")?;
        if j >= cols {
            return Err(invalid("select_column", format!("column {j} of {cols}")));
        }
        let d = self.data();
        let data = (0..rows).map(|r| d[r * cols + j]).collect();
        drop(d);
        Ok(Tensor::from_op(
            "select_column",
            vec![rows],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + j] = g[r];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Column sums of a matrix.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let [rows, cols] = self.matrix_dims("sum_rows")?;
        let d = self.data();
        let mut acc = vec![0f64; cols];
        for r in 0..rows {
            for c in 0..cols {
                acc[c] += d[r * cols + c] as f64;
            }
        }
        drop(d);
        Ok(Tensor::from_op(
            "sum_rows",
            vec![cols],
            acc.into_iter().map(|v| v as Float).collect(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    gx.extend_from_slice(g);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Entry `i` of a flat tensor, as a scalar.
    pub fn index(&self, i: usize) -> Result<Tensor> {
        let n = self.numel();
        if i >= n {
            return Err(invalid("index", format!("{i} out of {n}")));
        }
        let v = self.data()[i];
        Ok(Tensor::from_op(
            "index",
            vec![1],
            vec![v],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                gx[i] = g[0];
                vec![Some(gx)]
            }),
        ))
    }

    fn matrix_dims(&self, op: &'static str) -> Result<[usize; 2]> {
        match *self.shape() {
            [r, c] => Ok([r, c]),
            _ => Err(Error::Shape {
                op,
                dim: "rank",
                expected: 2,
                got: self.shape().len(),
            }),
        }
    }

    /// Softmax along the last axis of `x / tau`, max-subtracted.
    ///
    /// `-inf` entries are allowed (masked choices) and come out as exact zeros
    /// with zero gradient; each row needs at least one finite entry.
    pub fn softmax_temp(&self, tau: Float) -> Result<Tensor> {
        if !(tau > 0.0) {
            return Err(invalid("softmax_temp", format!("temperature must be > 0, got {tau}")));
        }
        let cols = *self.shape().last().expect("rank >= 1");
        let x = self.to_vec();
        let mut y = vec![0.0 as Float; x.len()];
        for (xr, yr) in x.chunks(cols).zip(y.chunks_mut(cols)) {
            let m = xr.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
            if !m.is_finite() {
                return Err(invalid("softmax_temp", "row without a finite entry"));
            }
            let mut z = 0f64;
            for (xv, yv) in xr.iter().zip(yr.iter_mut()) {
                let e = (((*xv - m) / tau) as f64).exp();
                *yv = e as Float;
                z += e;
            }
            for (xv, yv) in xr.iter().zip(yr.iter_mut()) {
                *yv = ((((*xv - m) / tau) as f64).exp() / z) as Float;
            }
        }
        let saved = y.clone();
        Ok(Tensor::from_op(
            "softmax_temp",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(cols).zip(saved.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = ((*yv as f64) * (*gv as f64 - s) / tau as f64) as Float;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// Concatenates scalars into a flat vector.
pub fn stack(values: &[Tensor]) -> Result<Tensor> {
    if values.iter().any(|v| v.numel() != 1) {
        return Err(invalid("stack", "expects one-element tensors"));
    }
    let n = values.len();
    if n == 0 {
        return Err(invalid("stack", "empty input"));
    }
    let data = values.iter().map(|v| v.item()).collect();
    Ok(Tensor::from_op(
        "stack",
        vec![n],
        data,
        values.to_vec(),
        Box::new(move |g| g.iter().map(|v| Some(vec![*v])).collect()),
    ))
}

/// `beta * ln(sum_i exp(v_i / beta))`: an upper bound on `max(v)` that is at
/// most `beta * ln(n)` above it.
pub fn smooth_max(values: &[Tensor], beta: Float) -> Result<Tensor> {
    if values.is_empty() {
        return Err(invalid("smooth_max", "empty input"));
    }
    if !(beta > 0.0) {
        return Err(invalid("smooth_max", format!("beta must be > 0, got {beta}")));
    }
    let v: Vec<f64> = values
        .iter()
        .map(|t| {
            if t.numel() != 1 {
                Err(invalid("smooth_max", "expects one-element tensors"))
            } else {
                Ok(t.item() as f64)
            }
        })
        .collect::<Result<_>>()?;
    let b = beta as f64;
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| ((x - m) / b).exp()).collect();
    let z: f64 = e.iter().sum();
    let out = m + b * z.ln();
    let weights: Vec<f64> = e.iter().map(|x| x / z).collect();
    Ok(Tensor::from_op(
        "smooth_max",
        vec![1],
        vec![out as Float],
        values.to_vec(),
        Box::new(move |g| {
            weights
                .iter()
                .map(|w| Some(vec![(w * g[0] as f64) as Float]))
                .collect()
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[Float]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetric_pair() {
        let y = t(&[2.5, 2.5]).softmax_temp(0.3).unwrap().to_vec();
        assert!((y[0] - 0.5).abs() < 1e-7 && (y[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn softmax_ln3() {
        let y = t(&[0.0, (3.0 as Float).ln()]).softmax_temp(1.0).unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-6);
        assert!((y[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_cold_limit() {
        let y = t(&[0.0, 1.0]).softmax_temp(0.01).unwrap().to_vec();
        assert!(y[0] < 1e-4 && (1.0 - y[1]) < 1e-4);
    }

    #[test]
    fn softmax_rejects_nonpositive_tau() {
        assert!(t(&[0.0, 1.0]).softmax_temp(0.0).is_err());
        assert!(t(&[0.0, 1.0]).softmax_temp(-1.0).is_err());
    }

    #[test]
    fn softmax_masked_entry_is_zero() {
        let a = Tensor::param(&[1, 3], vec![0.5, Float::NEG_INFINITY, 0.1]).unwrap();
        let y = a.softmax_temp(1.0).unwrap();
        assert_eq!(y.to_vec()[1], 0.0);
        y.select_column(1).unwrap().sum().add(&y.select_column(0).unwrap().sum()).unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap()[1], 0.0);
    }

    #[test]
    fn smooth_max_examples() {
        let z = Tensor::scalar(0.0);
        let v = smooth_max(&[z.clone(), z], 1.0).unwrap().item();
        assert!((v as f64 - 2f64.ln()).abs() < 1e-6);
        let v = smooth_max(&[Tensor::scalar(5.0)], 0.7).unwrap().item();
        assert!((v - 5.0).abs() < 1e-6);
        let v = smooth_max(&[Tensor::scalar(0.0), Tensor::scalar(10.0)], 0.1).unwrap().item();
        assert!((v - 10.0).abs() < 1e-6);
        assert!(smooth_max(&[], 1.0).is_err());
    }

    #[test]
    fn scale_rows_and_columns() {
        let m = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.sum_rows().unwrap().to_vec(), vec![4.0, 6.0]);
        assert_eq!(m.select_column(1).unwrap().to_vec(), vec![2.0, 4.0]);
        let s = m.scale_rows(&t(&[2.0, -1.0])).unwrap();
        assert_eq!(s.to_vec(), vec![2.0, 4.0, -3.0, -4.0]);
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        match a.add(&b) {
            Err(Error::Shape { expected: 3, got: 4, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
