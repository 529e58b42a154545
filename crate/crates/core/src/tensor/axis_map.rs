use super::{Result, Tensor, TensorError};

/// A sparse linear map applied independently along one axis of a tensor.
///
/// Row `j` of the map lists `(source index, weight)` pairs, so output position
/// `j` is `sum(w * x[k])`. Downsampling, moving averages, interpolation,
/// padding and index selection are all instances; the backward pass is the
/// transposed map.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisMap {
    in_len: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl AxisMap {
    pub fn from_rows(in_len: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.iter().flatten().any(|&(k, _)| k >= in_len) {
            return Err(TensorError::InvalidArgument {
                op: "axis_map",
                msg: format!("source index out of range for length {in_len}"),
            });
        }
        Ok(Self { in_len, rows })
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn identity(len: usize) -> Self {
        Self {
            in_len: len,
            rows: (0..len).map(|j| vec![(j, 1.0)]).collect(),
        }
    }

    pub fn downsample(len: usize, factor: usize) -> Result<Self> {
        if factor < 1 {
            return Err(TensorError::InvalidArgument {
                op: "avg_downsample",
                msg: "factor must be at least 1".into(),
            });
        }
        let out = len.div_ceil(factor);
        let rows = (0..out)
            .map(|i| {
                let lo = i * factor;
                let hi = ((i + 1) * factor).min(len);
                let w = 1.0 / (hi - lo) as f64;
                (lo..hi).map(|k| (k, w)).collect()
            })
            .collect();
        Ok(Self { in_len: len, rows })
    }

    /// Centered window of odd width with replicate padding at both ends.
    pub fn moving_average(len: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: "moving_average",
                msg: format!("kernel must be odd, got {kernel}"),
            });
        }
        if len == 0 || kernel > 2 * len - 1 {
            return Err(TensorError::InvalidArgument {
                op: "moving_average",
                msg: format!("kernel {kernel} too wide for length {len}"),
            });
        }
        if kernel == 1 {
            return Ok(Self::identity(len));
        }
        let half = (kernel - 1) / 2;
        let w = 1.0 / kernel as f64;
        let rows = (0..len)
            .map(|j| {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(kernel);
                for offset in 0..kernel {
                    let k = (j + offset).saturating_sub(half).min(len - 1);
                    match row.last_mut() {
                        Some(last) if last.0 == k => last.1 += w,
                        _ => row.push((k, w)),
                    }
                }
                row
            })
            .collect();
        Ok(Self { in_len: len, rows })
    }

    /// Endpoint-aligned linear resampling: output `t` reads source position
    /// `t * (len - 1) / (new_len - 1)`. A single output is the mean.
    pub fn linear_interp(len: usize, new_len: usize) -> Result<Self> {
        if len == 0 || new_len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "linear_interp",
                msg: format!("lengths must be positive, got {len} -> {new_len}"),
            });
        }
        if new_len == 1 {
            let w = 1.0 / len as f64;
            return Ok(Self {
                in_len: len,
                rows: vec![(0..len).map(|k| (k, w)).collect()],
            });
        }
        let den = new_len - 1;
        let rows = (0..new_len)
            .map(|t| {
                let num = t * (len - 1);
                let (k, rem) = (num / den, num % den);
                if rem == 0 {
                    vec![(k, 1.0)]
                } else {
                    let frac = rem as f64 / den as f64;
                    vec![(k, 1.0 - frac), (k + 1, frac)]
                }
            })
            .collect();
        Ok(Self { in_len: len, rows })
    }

    /// Pads `len` up to a multiple of `patch_len` by repeating the last index.
    /// Returns the map and the patch count.
    pub fn patch_pad(len: usize, patch_len: usize) -> Result<(Self, usize)> {
        if patch_len < 1 || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "patchify",
                msg: format!("patch length {patch_len} invalid for sequence length {len}"),
            });
        }
        let n = len.div_ceil(patch_len);
        let rows = (0..n * patch_len)
            .map(|j| vec![(j.min(len - 1), 1.0)])
            .collect();
        Ok((Self { in_len: len, rows }, n))
    }

    /// Keeps the first `new_len` positions.
    pub fn truncate(len: usize, new_len: usize) -> Result<Self> {
        if new_len > len {
            return Err(TensorError::InvalidArgument {
                op: "truncate",
                msg: format!("cannot truncate length {len} to {new_len}"),
            });
        }
        Ok(Self {
            in_len: len,
            rows: (0..new_len).map(|j| vec![(j, 1.0)]).collect(),
        })
    }

    pub fn select(len: usize, indices: &[usize]) -> Result<Self> {
        Self::from_rows(len, indices.iter().map(|&k| vec![(k, 1.0)]).collect())
    }

    /// Repeats a length-1 axis `out_len` times.
    pub fn broadcast(out_len: usize) -> Self {
        Self {
            in_len: 1,
            rows: vec![vec![(0, 1.0)]; out_len],
        }
    }

    /// Collapses the axis to length 1 holding its mean.
    pub fn mean(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean_axis",
                msg: "cannot average an empty axis".into(),
            });
        }
        let w = 1.0 / len as f64;
        Ok(Self {
            in_len: len,
            rows: vec![(0..len).map(|k| (k, w)).collect()],
        })
    }

    pub(crate) fn split_shape(
        &self,
        op: &'static str,
        shape: &[usize],
        axis: usize,
    ) -> Result<(usize, usize)> {
        let len = *shape.get(axis).ok_or(TensorError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        })?;
        if len != self.in_len {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("axis {axis} has length {len}, map expects {}", self.in_len),
            });
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, inner))
    }

    pub(crate) fn out_shape(&self, shape: &[usize], axis: usize) -> Vec<usize> {
        let mut out = shape.to_vec();
        out[axis] = self.out_len();
        out
    }

    pub fn apply(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let (outer, inner) = self.split_shape("axis_map", x.shape(), axis)?;
        let shape = self.out_shape(x.shape(), axis);
        let data = self.forward_raw(x.data(), outer, inner);
        Tensor::new(shape, data)
    }

    pub(crate) fn forward_raw(&self, x: &[f64], outer: usize, inner: usize) -> Vec<f64> {
        let out_len = self.rows.len();
        let mut out = vec![0.0; outer * out_len * inner];
        for o in 0..outer {
            let src = &x[o * self.in_len * inner..(o + 1) * self.in_len * inner];
            let dst = &mut out[o * out_len * inner..(o + 1) * out_len * inner];
            for (j, row) in self.rows.iter().enumerate() {
                let d = &mut dst[j * inner..(j + 1) * inner];
                for &(k, w) in row {
                    let s = &src[k * inner..(k + 1) * inner];
                    for (di, si) in d.iter_mut().zip(s) {
                        *di += w * si;
                    }
                }
            }
        }
        out
    }

    /// Accumulates the transposed map of `grad` into `acc`.
    pub(crate) fn backward_raw(&self, grad: &[f64], acc: &mut [f64], outer: usize, inner: usize) {
        let out_len = self.rows.len();
        for o in 0..outer {
            let g = &grad[o * out_len * inner..(o + 1) * out_len * inner];
            let a = &mut acc[o * self.in_len * inner..(o + 1) * self.in_len * inner];
            for (j, row) in self.rows.iter().enumerate() {
                let gj = &g[j * inner..(j + 1) * inner];
                for &(k, w) in row {
                    let ak = &mut a[k * inner..(k + 1) * inner];
                    for (ai, gi) in ak.iter_mut().zip(gj) {
                        *ai += w * gi;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(map: &AxisMap, x: &[f64]) -> Vec<f64> {
        map.apply(&Tensor::from_vec(x.to_vec()), 0)
            .unwrap()
            .into_data()
    }

    #[test]
    fn downsample_even_and_ragged() {
        assert_eq!(
            run(&AxisMap::downsample(4, 2).unwrap(), &[1.0, 2.0, 3.0, 4.0]),
            vec![1.5, 3.5]
        );
        assert_eq!(
            run(&AxisMap::downsample(3, 2).unwrap(), &[1.0, 2.0, 3.0]),
            vec![1.5, 3.0]
        );
        assert_eq!(
            run(&AxisMap::downsample(3, 1).unwrap(), &[1.0, 2.0, 3.0]),
            vec![1.0, 2.0, 3.0]
        );
        assert!(AxisMap::downsample(3, 0).is_err());
    }

    #[test]
    fn moving_average_replicate_pad() {
        let out = run(
            &AxisMap::moving_average(5, 3).unwrap(),
            &[0.0, 0.0, 3.0, 0.0, 0.0],
        );
        for (o, e) in out.iter().zip([0.0, 1.0, 1.0, 1.0, 0.0]) {
            assert!((o - e).abs() < 1e-15);
        }
        let c = run(&AxisMap::moving_average(6, 5).unwrap(), &[2.5; 6]);
        assert!(c.iter().all(|v| (v - 2.5).abs() < 1e-12));
        assert_eq!(
            run(&AxisMap::moving_average(3, 1).unwrap(), &[1.0, 5.0, 2.0]),
            vec![1.0, 5.0, 2.0]
        );
    }

    #[test]
    fn moving_average_rejects_even_or_wide_kernel() {
        assert!(AxisMap::moving_average(10, 4).is_err());
        assert!(AxisMap::moving_average(3, 7).is_err());
        assert!(AxisMap::moving_average(3, 5).is_ok());
    }

    #[test]
    fn interp_cases() {
        assert_eq!(
            run(&AxisMap::linear_interp(2, 3).unwrap(), &[0.0, 2.0]),
            vec![0.0, 1.0, 2.0]
        );
        assert_eq!(
            run(&AxisMap::linear_interp(3, 5).unwrap(), &[1.0, 3.0, 5.0]),
            vec![1.0, 2.0, 3.0, 4.0, 5.0]
        );
        assert_eq!(
            run(&AxisMap::linear_interp(3, 3).unwrap(), &[4.0, -1.0, 2.0]),
            vec![4.0, -1.0, 2.0]
        );
        assert_eq!(
            run(&AxisMap::linear_interp(3, 1).unwrap(), &[1.0, 2.0, 6.0]),
            vec![3.0]
        );
        assert!(AxisMap::linear_interp(3, 0).is_err());
    }

    #[test]
    fn inner_axis_application() {
        // [2, 4] downsampled along axis 1
        let x = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = x.avg_downsample(1, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[1.5, 3.5, 5.5, 7.5]);
    }

    #[test]
    fn select_rejects_out_of_range() {
        assert!(AxisMap::select(3, &[0, 3]).is_err());
    }
}
