use crate::{Error, Result};

/// Dense n-dimensional array of 64-bit floats in row-major order.
///
/// This is a plain value type: gradients and graph identity live in
/// [`super::Graph`], which stores tensors at its nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Config(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// One-hot probability vector of length `len`.
    pub fn one_hot(len: usize, index: usize) -> Result<Tensor> {
        if index >= len {
            return Err(Error::Usage(format!(
                "one-hot index {index} out of range for length {len}"
            )));
        }
        let mut data = vec![0.0; len];
        data[index] = 1.0;
        Ok(Tensor {
            shape: vec![len],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks parts along the channel axis into a `[sum(C_i), H, W]` tensor.
    /// Two-dimensional `[H, W]` parts are promoted to one channel.
    pub fn stack_channels(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Config("stack_channels of zero tensors".into()));
        }
        let hw = |t: &Tensor| -> Result<(usize, usize, usize)> {
            match t.shape() {
                [h, w] => Ok((1, *h, *w)),
                [c, h, w] => Ok((*c, *h, *w)),
                other => Err(Error::Config(format!(
                    "stack_channels expects 2-d or 3-d parts, got {other:?}"
                ))),
            }
        };
        let (_, h0, w0) = hw(parts[0])?;
        let mut channels = 0;
        for part in parts {
            let (c, h, w) = hw(part)?;
            if (h, w) != (h0, w0) {
                return Err(Error::Config(format!(
                    "stack_channels spatial mismatch: {h}x{w} vs {h0}x{w0}"
                )));
            }
            channels += c;
        }
        let mut data = Vec::with_capacity(channels * h0 * w0);
        for part in parts {
            data.extend_from_slice(part.data());
        }
        Tensor::new(vec![channels, h0, w0], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn stack_channels_orders_and_promotes() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = Tensor::stack_channels(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn stack_channels_rejects_spatial_mismatch() {
        let a = Tensor::zeros(&[1, 2, 2]);
        let b = Tensor::zeros(&[1, 3, 3]);
        assert!(Tensor::stack_channels(&[&a, &b]).is_err());
    }
}
