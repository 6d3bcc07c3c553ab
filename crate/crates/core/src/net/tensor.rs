use super::NetError;

/// Dense row-major array of `f64`. Feature maps are `(batch, channels,
/// height, width)`; matrices are `(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NetError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NetError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), NetError> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(NetError::Shape(format!(
                "expected a 4-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize), NetError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(NetError::Shape(format!(
                "expected a 2-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NetError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NetError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn scaled(mut self, k: f64) -> Self {
        self.scale(k);
        self
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), NetError> {
        if self.shape != other.shape {
            return Err(NetError::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Element at `(n, c, y, x)` of a 4-d tensor.
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cc, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cc + c) * h + y) * w + x]
    }

    /// Splits a `(n, ...)` tensor into its `n` items.
    pub fn unstack(&self) -> Vec<Tensor> {
        let n = self.shape[0];
        let item = self.data.len() / n.max(1);
        let mut shape = self.shape.clone();
        shape[0] = 1;
        (0..n)
            .map(|i| Tensor {
                shape: shape.clone(),
                data: self.data[i * item..(i + 1) * item].to_vec(),
            })
            .collect()
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor, NetError> {
        let first = items
            .first()
            .ok_or_else(|| NetError::Shape("cannot stack zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if &t.shape[1..] != tail {
                return Err(NetError::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }
}

/// Zero-pads the spatial dims of a 4-d tensor up to multiples of `m`.
pub fn pad_to_multiple(x: &Tensor, m: usize) -> Result<Tensor, NetError> {
    let (n, c, h, w) = x.dims4()?;
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if ph == h && pw == w {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(&[n, c, ph, pw]);
    for plane in 0..n * c {
        for y in 0..h {
            let src = &x.data[(plane * h + y) * w..(plane * h + y + 1) * w];
            let dst = (plane * ph + y) * pw;
            out.data[dst..dst + w].copy_from_slice(src);
        }
    }
    Ok(out)
}
