use super::graph::{Graph, Op, Var};
use super::{Real, Result, Tensor, TensorError};

impl<T: Real> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::shape(
                "add",
                format!("shapes {:?} and {:?} differ", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(TensorError::shape(
                "concat_channels",
                format!(
                    "batch/spatial dims differ: {:?} vs {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            data.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("slice_channels")?;
        if len == 0 || start + len > c {
            return Err(TensorError::shape(
                "slice_channels",
                format!("range {start}..{} out of {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let off = (b * c + start) * plane;
            data.extend_from_slice(&src[off..off + len * plane]);
        }
        let out = Tensor::new(vec![n, len, h, w], data)?;
        Ok(self.push(out, Op::SliceChannels { x, start }, &[x]))
    }

    /// Mean squared difference over every element; returns a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::shape(
                "mse",
                format!("shapes {:?} and {:?} differ", va.shape(), vb.shape()),
            ));
        }
        let sum: T = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let n = T::from_usize(va.len()).expect("length");
        Ok(self.push(Tensor::scalar(sum / n), Op::Mse(a, b), &[a, b]))
    }
}

pub(crate) fn relu_backward<T: Real>(g: &Graph<T>, x: Var, grad: &[T]) -> Vec<(Var, Vec<T>)> {
    let xs = g.value(x).data();
    let dx = xs
        .iter()
        .zip(grad)
        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
        .collect();
    vec![(x, dx)]
}

pub(crate) fn sigmoid_backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    out: Var,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let ys = g.value(out).data();
    let dx = ys
        .iter()
        .zip(grad)
        .map(|(&y, &d)| d * y * (T::one() - y))
        .collect();
    vec![(x, dx)]
}

pub(crate) fn add_backward<T: Real>(
    g: &Graph<T>,
    a: Var,
    b: Var,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let mut out = Vec::with_capacity(2);
    if g.needs(a) {
        out.push((a, grad.to_vec()));
    }
    if g.needs(b) {
        out.push((b, grad.to_vec()));
    }
    out
}

pub(crate) fn scale_backward<T: Real>(
    _g: &Graph<T>,
    x: Var,
    factor: T,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    vec![(x, grad.iter().map(|&d| d * factor).collect())]
}

pub(crate) fn concat_backward<T: Real>(
    g: &Graph<T>,
    a: Var,
    b: Var,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let [n, ca, h, w] = g.shape(a)[..] else {
        unreachable!()
    };
    let cb = g.shape(b)[1];
    let plane = h * w;
    let mut da = Vec::with_capacity(n * ca * plane);
    let mut db = Vec::with_capacity(n * cb * plane);
    for item in grad.chunks(((ca + cb) * plane).max(1)) {
        da.extend_from_slice(&item[..ca * plane]);
        db.extend_from_slice(&item[ca * plane..]);
    }
    let mut out = Vec::with_capacity(2);
    if g.needs(a) {
        out.push((a, da));
    }
    if g.needs(b) {
        out.push((b, db));
    }
    out
}

pub(crate) fn slice_backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    out: Var,
    start: usize,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let [n, c, h, w] = g.shape(x)[..] else {
        unreachable!()
    };
    let len = g.shape(out)[1];
    let plane = h * w;
    let mut dx = vec![T::zero(); n * c * plane];
    for b in 0..n {
        let dst = (b * c + start) * plane;
        let src = b * len * plane;
        dx[dst..dst + len * plane].copy_from_slice(&grad[src..src + len * plane]);
    }
    vec![(x, dx)]
}

pub(crate) fn mse_backward<T: Real>(
    g: &Graph<T>,
    a: Var,
    b: Var,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let (va, vb) = (g.value(a).data(), g.value(b).data());
    let k = grad[0] * T::lit(2.0) / T::from_usize(va.len()).expect("length");
    let mut out = Vec::with_capacity(2);
    if g.needs(a) {
        out.push((a, va.iter().zip(vb).map(|(&x, &y)| k * (x - y)).collect()));
    }
    if g.needs(b) {
        out.push((b, va.iter().zip(vb).map(|(&x, &y)| k * (y - x)).collect()));
    }
    out
}
