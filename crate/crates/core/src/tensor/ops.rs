use super::fft::fft2_pair;
use super::{
    accumulate, broadcast_shape, broadcast_to, pad_axis_high, reduce_to_shape, Op, Real, Tape,
    Var, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, Ix3, IxDyn, Slice, Zip};
use std::sync::Arc;

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::fd(GELU_COEF);
    let k = T::fd(SQRT_2_OVER_PI);
    let u = k * (x + c * x * x * x);
    T::fd(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::fd(GELU_COEF);
    let k = T::fd(SQRT_2_OVER_PI);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::fd(3.0) * c * x * x);
    T::fd(0.5) * (T::one() + t) + T::fd(0.5) * x * (T::one() - t * t) * du
}

fn softplus_scalar<T: Real>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|)) avoids overflow on both tails.
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn as_2d<T: Real>(x: &ArrayD<T>) -> ndarray::Array2<T> {
    x.to_owned()
        .into_dimensionality::<Ix2>()
        .expect("rank-2 tensor")
}

fn matmul_forward<T: Real>(a: &ArrayD<T>, b: &ArrayD<T>) -> Result<ArrayD<T>> {
    let (ra, rb) = (a.ndim(), b.ndim());
    if ra == 2 && rb == 2 {
        if a.shape()[1] != b.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}: inner dimensions differ",
                a.shape(),
                b.shape()
            )));
        }
        return Ok(as_2d(a).dot(&as_2d(b)).into_dyn());
    }
    if ra >= 2 && rb == 2 {
        let k = a.shape()[ra - 1];
        if k != b.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}: inner dimensions differ",
                a.shape(),
                b.shape()
            )));
        }
        let lead: usize = a.shape()[..ra - 1].iter().product();
        let a2 = a
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((lead, k))
            .expect("contiguous reshape");
        let out2 = a2.dot(&as_2d(b));
        let mut out_shape = a.shape()[..ra - 1].to_vec();
        out_shape.push(b.shape()[1]);
        return Ok(out2.into_shape_with_order(IxDyn(&out_shape)).expect("reshape"));
    }
    if ra == 3 && rb == 3 {
        let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bb, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        if ba != bb || k != k2 {
            return Err(Error::Shape(format!(
                "batched matmul {:?} x {:?}: batch or inner dimensions differ",
                a.shape(),
                b.shape()
            )));
        }
        let a3 = a.view().into_dimensionality::<Ix3>().expect("rank 3");
        let b3 = b.view().into_dimensionality::<Ix3>().expect("rank 3");
        let mut out = ndarray::Array3::<T>::zeros((ba, m, n));
        for i in 0..ba {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
        return Ok(out.into_dyn());
    }
    Err(Error::Shape(format!(
        "unsupported matmul ranks {ra} x {rb} (need 2x2, Nx2, or 3x3)"
    )))
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let av = broadcast_to(self.value(a), &shape);
        let bv = broadcast_to(self.value(b), &shape);
        Ok(self.push(av + bv, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, T::fd(-1.0));
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let av = broadcast_to(self.value(a), &shape);
        let bv = broadcast_to(self.value(b), &shape);
        Ok(self.push(av * bv, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddScalar(a.0, c))
    }

    /// `2x2`, `Nx2` (trailing-axis contraction), or batched `3x3` matrix
    /// product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_forward(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a.0, b.0)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({n})",
                self.shape(a),
                self.value(a).len()
            )));
        }
        let v = self
            .value(a)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("validated reshape");
        Ok(self.push(v, Op::Reshape(a.0)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        if axes.len() != self.value(a).ndim() {
            return Err(Error::Shape(format!(
                "permute axes {axes:?} do not match rank {}",
                self.value(a).ndim()
            )));
        }
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        Ok(self.push(v, Op::Permute(a.0, axes.to_vec())))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let views: Vec<ArrayViewD<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| Error::Shape(format!("concat: {e}")))?;
        Ok(self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect(), axis)))
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dim = self.shape(a)[axis];
        if start + len > dim {
            return Err(Error::Shape(format!(
                "slice {start}..{} out of range for axis {axis} of size {dim}",
                start + len
            )));
        }
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        Ok(self.push(v, Op::SliceAxis { parent: a.0, axis, start }))
    }

    /// Zero-pads the high end of one axis.
    pub fn pad_axis(&mut self, a: Var, axis: usize, after: usize) -> Result<Var> {
        if axis >= self.value(a).ndim() {
            return Err(Error::Shape(format!("pad axis {axis} out of range")));
        }
        if after == 0 {
            // Still records a node so gradients flow uniformly.
            let v = self.value(a).clone();
            return Ok(self.push(v, Op::PadAxis { parent: a.0, axis }));
        }
        let v = pad_axis_high(self.value(a), axis, after);
        Ok(self.push(v, Op::PadAxis { parent: a.0, axis }))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).expect("length fits");
        let total = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        let v = ArrayD::from_elem(IxDyn(&[]), total / n);
        self.push(v, Op::MeanAll(a.0))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis >= self.value(a).ndim() {
            return Err(Error::Shape(format!("mean axis {axis} out of range")));
        }
        let v = self.value(a).mean_axis(Axis(axis)).expect("non-empty axis");
        Ok(self.push(v, Op::MeanAxis(a.0, axis)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a.0))
    }

    /// GELU in its tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_scalar);
        self.push(v, Op::Gelu(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus_scalar);
        self.push(v, Op::Softplus(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.sqrt());
        self.push(v, Op::Sqrt(a.0))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| T::one() / x);
        self.push(v, Op::Recip(a.0))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis >= self.value(a).ndim() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range")));
        }
        if self.shape(a)[axis] == 0 {
            return Err(Error::Shape("softmax over empty axis".into()));
        }
        let mut v = self.value(a).as_standard_layout().to_owned();
        for mut lane in v.lanes_mut(Axis(axis)) {
            let m = lane.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            lane.mapv_inplace(|x| (x - m).exp());
            let s = lane.iter().fold(T::zero(), |acc, &x| acc + x);
            lane.mapv_inplace(|x| x / s);
        }
        Ok(self.push(v, Op::Softmax(a.0, axis)))
    }

    /// Layer normalization over the last axis with affine parameters.
    /// `gamma` and `beta` have the size of that axis; epsilon is 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::Shape("layer_norm needs rank >= 1".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm affine shapes {:?}/{:?} do not match feature size {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = T::fd(LAYER_NORM_EPS);
        let n = T::from_usize(d).expect("axis length fits");
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let mut v = self.value(x).as_standard_layout().to_owned();
        let last = v.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let mu = lane.iter().fold(T::zero(), |acc, &x| acc + x) / n;
            let var = lane.iter().fold(T::zero(), |acc, &x| acc + (x - mu) * (x - mu)) / n;
            let inv = T::one() / (var + eps).sqrt();
            for (k, e) in lane.iter_mut().enumerate() {
                *e = (*e - mu) * inv * gv[[k]] + bv[[k]];
            }
        }
        Ok(self.push(v, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0 }))
    }

    /// Unnormalized forward DFT over axes (0, 1); returns (real, imaginary).
    pub fn fft2(&mut self, a: Var) -> Result<(Var, Var)> {
        if self.value(a).ndim() < 2 {
            return Err(Error::Shape("fft2 needs at least 2 axes".into()));
        }
        let (re, im) = fft2_pair(self.value(a), None, false);
        let vre = self.push(re, Op::Fft2Re(a.0));
        let vim = self.push(im, Op::Fft2Im(a.0));
        Ok((vre, vim))
    }

    /// 1/(H·W)-normalized inverse DFT over axes (0, 1); keeps the real part.
    pub fn ifft2(&mut self, re: Var, im: Var) -> Result<Var> {
        if self.shape(re) != self.shape(im) {
            return Err(Error::Shape(format!(
                "ifft2 parts differ: {:?} vs {:?}",
                self.shape(re),
                self.shape(im)
            )));
        }
        if self.value(re).ndim() < 2 {
            return Err(Error::Shape("ifft2 needs at least 2 axes".into()));
        }
        let (out, _residue) = fft2_pair(self.value(re), Some(self.value(im)), true);
        Ok(self.push(out, Op::Ifft2(re.0, im.0)))
    }

    /// Row gather: `out[k, :] = table[indices[k], :]`.
    pub fn index_select(&mut self, table: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(Error::Shape("index_select expects a rank-2 table".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= tshape[0]) {
            return Err(Error::Shape(format!(
                "index {bad} out of range for table with {} rows",
                tshape[0]
            )));
        }
        let mut out = ArrayD::zeros(IxDyn(&[indices.len(), tshape[1]]));
        for (k, &row) in indices.iter().enumerate() {
            for c in 0..tshape[1] {
                out[[k, c]] = self.value(table)[[row, c]];
            }
        }
        Ok(self.push(out, Op::IndexSelect(table.0, indices)))
    }

    /// Cyclic shift along one axis; positive shifts move toward higher
    /// indices with wraparound.
    pub fn roll(&mut self, a: Var, axis: usize, shift: isize) -> Result<Var> {
        let n = self.shape(a)[axis] as isize;
        let s = shift.rem_euclid(n);
        let x = self.value(a);
        let mut out = ArrayD::zeros(x.raw_dim());
        if s == 0 {
            out.assign(x);
        } else {
            out.slice_axis_mut(Axis(axis), Slice::from(s..n))
                .assign(&x.slice_axis(Axis(axis), Slice::from(0..n - s)));
            out.slice_axis_mut(Axis(axis), Slice::from(0..s))
                .assign(&x.slice_axis(Axis(axis), Slice::from(n - s..n)));
        }
        Ok(self.push(out, Op::Roll { parent: a.0, axis, shift: s }))
    }

    pub(crate) fn backstep(
        &self,
        i: usize,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) -> Result<()> {
        let value = |p: usize| &self.nodes[p].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, reduce_to_shape(g, value(*a).shape()));
                accumulate(grads, *b, reduce_to_shape(g, value(*b).shape()));
            }
            Op::Mul(a, b) => {
                let shape = g.shape();
                let bv = broadcast_to(value(*b), shape);
                let av = broadcast_to(value(*a), shape);
                accumulate(grads, *a, reduce_to_shape(&(g * &bv), value(*a).shape()));
                accumulate(grads, *b, reduce_to_shape(&(g * &av), value(*b).shape()));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.mapv(|x| x * *c)),
            Op::AddScalar(a, _) => accumulate(grads, *a, g.clone()),
            Op::Matmul(a, b) => {
                let (av, bv) = (value(*a), value(*b));
                let (ra, rb) = (av.ndim(), bv.ndim());
                if rb == 2 {
                    let k = av.shape()[ra - 1];
                    let lead: usize = av.shape()[..ra - 1].iter().product();
                    let a2 = av
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((lead, k))
                        .expect("reshape");
                    let g2 = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((lead, bv.shape()[1]))
                        .expect("reshape");
                    let da = g2.dot(&as_2d(bv).t());
                    let db = a2.t().dot(&g2);
                    accumulate(
                        grads,
                        *a,
                        da.into_shape_with_order(av.raw_dim()).expect("reshape").into_dyn(),
                    );
                    accumulate(grads, *b, db.into_dyn());
                } else {
                    // Batched 3x3.
                    let a3 = av.view().into_dimensionality::<Ix3>().expect("rank 3");
                    let b3 = bv.view().into_dimensionality::<Ix3>().expect("rank 3");
                    let g3 = g.view().into_dimensionality::<Ix3>().expect("rank 3");
                    let mut da = ndarray::Array3::<T>::zeros(a3.raw_dim());
                    let mut db = ndarray::Array3::<T>::zeros(b3.raw_dim());
                    for s in 0..a3.shape()[0] {
                        let gs = g3.index_axis(Axis(0), s);
                        da.index_axis_mut(Axis(0), s)
                            .assign(&gs.dot(&b3.index_axis(Axis(0), s).t()));
                        db.index_axis_mut(Axis(0), s)
                            .assign(&a3.index_axis(Axis(0), s).t().dot(&gs));
                    }
                    accumulate(grads, *a, da.into_dyn());
                    accumulate(grads, *b, db.into_dyn());
                }
            }
            Op::Reshape(a) => {
                let back = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(value(*a).raw_dim())
                    .expect("reshape back");
                accumulate(grads, *a, back);
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0usize; axes.len()];
                for (to, &from) in axes.iter().enumerate() {
                    inverse[from] = to;
                }
                let back = g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned();
                accumulate(grads, *a, back);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = value(p).shape()[*axis];
                    let piece = g
                        .slice_axis(Axis(*axis), Slice::from(start..start + len))
                        .to_owned();
                    accumulate(grads, p, piece);
                    start += len;
                }
            }
            Op::SliceAxis { parent, axis, start } => {
                let mut back = ArrayD::zeros(value(*parent).raw_dim());
                let len = g.shape()[*axis];
                back.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                    .assign(g);
                accumulate(grads, *parent, back);
            }
            Op::PadAxis { parent, axis } => {
                let len = value(*parent).shape()[*axis];
                let back = g.slice_axis(Axis(*axis), Slice::from(0..len)).to_owned();
                accumulate(grads, *parent, back);
            }
            Op::MeanAll(a) => {
                let n = T::from_usize(value(*a).len()).expect("length fits");
                let gv = *g.iter().next().expect("scalar gradient");
                accumulate(grads, *a, ArrayD::from_elem(value(*a).raw_dim(), gv / n));
            }
            Op::MeanAxis(a, axis) => {
                let n = T::from_usize(value(*a).shape()[*axis]).expect("axis fits");
                let expanded = g.view().insert_axis(Axis(*axis));
                let back = expanded
                    .broadcast(value(*a).raw_dim())
                    .expect("broadcast back")
                    .mapv(|x| x / n);
                accumulate(grads, *a, back);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                accumulate(grads, *a, Zip::from(g).and(y).map_collect(|&g, &y| g * (T::one() - y * y)));
            }
            Op::Gelu(a) => {
                let back = Zip::from(g).and(value(*a)).map_collect(|&g, &x| g * gelu_grad_scalar(x));
                accumulate(grads, *a, back);
            }
            Op::Relu(a) => {
                let back = Zip::from(g)
                    .and(value(*a))
                    .map_collect(|&g, &x| if x > T::zero() { g } else { T::zero() });
                accumulate(grads, *a, back);
            }
            Op::Softplus(a) => {
                let back = Zip::from(g).and(value(*a)).map_collect(|&g, &x| g * sigmoid_scalar(x));
                accumulate(grads, *a, back);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                let back = Zip::from(g).and(y).map_collect(|&g, &y| g / (T::fd(2.0) * y));
                accumulate(grads, *a, back);
            }
            Op::Recip(a) => {
                let y = &self.nodes[i].value;
                let back = Zip::from(g).and(y).map_collect(|&g, &y| -g * y * y);
                accumulate(grads, *a, back);
            }
            Op::Softmax(a, axis) => {
                let y = &self.nodes[i].value;
                let mut back = g.clone();
                for (mut gl, yl) in back.lanes_mut(Axis(*axis)).into_iter().zip(y.lanes(Axis(*axis)))
                {
                    let dot = gl
                        .iter()
                        .zip(yl.iter())
                        .fold(T::zero(), |acc, (&gi, &yi)| acc + gi * yi);
                    for (gi, &yi) in gl.iter_mut().zip(yl.iter()) {
                        *gi = yi * (*gi - dot);
                    }
                }
                accumulate(grads, *a, back);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = value(*x);
                let gv = value(*gamma);
                let d = xv.shape()[xv.ndim() - 1];
                let n = T::from_usize(d).expect("axis length fits");
                let eps = T::fd(LAYER_NORM_EPS);
                let last = xv.ndim() - 1;
                let mut dx = ArrayD::zeros(xv.raw_dim());
                let mut dgamma = ArrayD::<T>::zeros(IxDyn(&[d]));
                let mut dbeta = ArrayD::<T>::zeros(IxDyn(&[d]));
                let gc = g.as_standard_layout().to_owned();
                let xc = xv.as_standard_layout().to_owned();
                for ((xl, gl), mut dxl) in xc
                    .lanes(Axis(last))
                    .into_iter()
                    .zip(gc.lanes(Axis(last)))
                    .zip(dx.lanes_mut(Axis(last)))
                {
                    let mu = xl.iter().fold(T::zero(), |acc, &v| acc + v) / n;
                    let var = xl.iter().fold(T::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / n;
                    let inv = T::one() / (var + eps).sqrt();
                    // dxhat, and the two lane means the chain rule needs.
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    let mut dxhat = vec![T::zero(); d];
                    let mut xhat = vec![T::zero(); d];
                    for k in 0..d {
                        xhat[k] = (xl[k] - mu) * inv;
                        dxhat[k] = gl[k] * gv[[k]];
                        mean_dxhat += dxhat[k];
                        mean_dxhat_xhat += dxhat[k] * xhat[k];
                        dgamma[[k]] += gl[k] * xhat[k];
                        dbeta[[k]] += gl[k];
                    }
                    mean_dxhat /= n;
                    mean_dxhat_xhat /= n;
                    for k in 0..d {
                        dxl[k] = inv * (dxhat[k] - mean_dxhat - xhat[k] * mean_dxhat_xhat);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Fft2Re(a) => {
                let (re, _) = fft2_pair(g, None, false);
                accumulate(grads, *a, re);
            }
            Op::Fft2Im(a) => {
                let (_, im) = fft2_pair(g, None, false);
                accumulate(grads, *a, im);
            }
            Op::Ifft2(re, im) => {
                let hw = g.shape()[0] * g.shape()[1];
                let scale = T::one() / T::from_usize(hw).expect("grid fits");
                let (tre, tim) = fft2_pair(g, None, false);
                accumulate(grads, *re, tre.mapv(|x| x * scale));
                accumulate(grads, *im, tim.mapv(|x| x * scale));
            }
            Op::IndexSelect(table, indices) => {
                let mut back = ArrayD::zeros(value(*table).raw_dim());
                let cols = back.shape()[1];
                for (k, &row) in indices.iter().enumerate() {
                    for c in 0..cols {
                        back[[row, c]] += g[[k, c]];
                    }
                }
                accumulate(grads, *table, back);
            }
            Op::Roll { parent, axis, shift } => {
                let n = g.shape()[*axis] as isize;
                let s = (-shift).rem_euclid(n);
                let mut back = ArrayD::zeros(g.raw_dim());
                if s == 0 {
                    back.assign(g);
                } else {
                    back.slice_axis_mut(Axis(*axis), Slice::from(s..n))
                        .assign(&g.slice_axis(Axis(*axis), Slice::from(0..n - s)));
                    back.slice_axis_mut(Axis(*axis), Slice::from(0..s))
                        .assign(&g.slice_axis(Axis(*axis), Slice::from(n - s..n)));
                }
                accumulate(grads, *parent, back);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use ndarray::IxDyn;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(random(&[5, 7], 1));
        let y = tape.softmax(x, 1).unwrap();
        for lane in tape.value(y).lanes(Axis(1)) {
            let s: f64 = lane.sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(lane.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(random(&[4, 9], 2));
        let gamma = tape.leaf(ArrayD::ones(IxDyn(&[9])));
        let beta = tape.leaf(ArrayD::zeros(IxDyn(&[9])));
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        for lane in tape.value(y).lanes(Axis(1)) {
            let mu: f64 = lane.sum() / 9.0;
            let var: f64 = lane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / 9.0;
            assert!(mu.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn identity_gradient_is_exact() {
        // At x = 0 both probes are representable, so the central difference
        // evaluates to exactly 1 and the error is exactly 0.
        let err = grad_check(
            |_, vars| Ok(vars[0]),
            &[ArrayD::from_elem(IxDyn(&[]), 0.0f64)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn tanh_gradient_tight() {
        let err = grad_check(
            |tape, vars| Ok(tape.tanh(vars[0])),
            &[ArrayD::from_elem(IxDyn(&[]), 0.3f64)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-8, "tanh grad error {err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let err = grad_check(
            |tape, vars| {
                let y = tape.matmul(vars[0], vars[1])?;
                Ok(tape.mean_all(y))
            },
            &[random(&[3, 4], 3), random(&[4, 2], 4)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "matmul grad error {err}");
    }

    #[test]
    fn batched_matmul_gradient() {
        let err = grad_check(
            |tape, vars| {
                let y = tape.matmul(vars[0], vars[1])?;
                Ok(tape.mean_all(y))
            },
            &[random(&[2, 3, 4], 5), random(&[2, 4, 3], 6)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "batched matmul grad error {err}");
    }

    #[test]
    fn elementwise_and_shape_op_gradients() {
        let opts = GradCheckOptions::default();
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> crate::error::Result<Var>>)> = vec![
            ("gelu", Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.gelu(v[0]);
                Ok(t.mean_all(y))
            })),
            ("softplus", Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.softplus(v[0]);
                Ok(t.mean_all(y))
            })),
            ("softmax", Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.softmax(v[0], 1)?;
                let w = t.mul(y, y)?;
                Ok(t.mean_all(w))
            })),
            ("permute+reshape+slice", Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let p = t.permute(v[0], &[1, 0])?;
                let r = t.reshape(p, &[2, 2, 5])?;
                let s = t.slice_axis(r, 2, 1, 3)?;
                let q = t.mul(s, s)?;
                Ok(t.mean_all(q))
            })),
            ("pad+roll+mean_axis", Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let p = t.pad_axis(v[0], 0, 3)?;
                let r = t.roll(p, 0, 2)?;
                let m = t.mean_axis(r, 1)?;
                let q = t.mul(m, m)?;
                Ok(t.mean_all(q))
            })),
        ];
        for (name, build) in cases {
            let err = grad_check(
                |tape, vars| build(tape, vars),
                &[random(&[4, 5], 77)],
                &opts,
            )
            .unwrap();
            assert!(err < 1e-6, "{name} grad error {err}");
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let err = grad_check(
            |tape, vars| {
                let y = tape.layer_norm(vars[0], vars[1], vars[2])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &[random(&[3, 6], 8), random(&[6], 9), random(&[6], 10)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "layer_norm grad error {err}");
    }

    #[test]
    fn fft_roundtrip_and_gradients() {
        let x = random(&[6, 10], 11);
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(x.clone());
        let (re, im) = tape.fft2(v).unwrap();
        let back = tape.ifft2(re, im).unwrap();
        for (a, b) in x.iter().zip(tape.value(back).iter()) {
            assert!((a - b).abs() < 1e-10);
        }

        let err = grad_check(
            |tape, vars| {
                let (re, im) = tape.fft2(vars[0])?;
                let y = tape.ifft2(re, im)?;
                let w = tape.mul(y, y)?;
                Ok(tape.mean_all(w))
            },
            &[random(&[5, 6], 12)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "fft grad error {err}");

        // Spectral-weighting path: gradients through re/im separately.
        let err = grad_check(
            |tape, vars| {
                let (re, im) = tape.fft2(vars[0])?;
                let wre = tape.mul(re, vars[1])?;
                let wim = tape.mul(im, vars[1])?;
                let y = tape.ifft2(wre, wim)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &[random(&[4, 6], 13), random(&[4, 6], 14)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "spectral weighting grad error {err}");
    }

    #[test]
    fn index_select_and_concat_gradients() {
        let idx = Arc::new(vec![2usize, 0, 2, 1]);
        let err = grad_check(
            move |tape, vars| {
                let rows = tape.index_select(vars[0], idx.clone())?;
                let cat = tape.concat(&[rows, vars[1]], 0)?;
                let sq = tape.mul(cat, cat)?;
                Ok(tape.mean_all(sq))
            },
            &[random(&[3, 4], 15), random(&[2, 4], 16)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "index_select/concat grad error {err}");
    }

    #[test]
    fn broadcasting_add_mul_gradients() {
        let err = grad_check(
            |tape, vars| {
                let y = tape.add(vars[0], vars[1])?;
                let z = tape.mul(y, vars[2])?;
                Ok(tape.mean_all(z))
            },
            &[random(&[2, 3, 4], 17), random(&[3, 4], 18), random(&[4], 19)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "broadcast grad error {err}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(random(&[2, 3], 20));
        let b = tape.leaf(random(&[2, 4], 21));
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
        let empty = tape.leaf(ArrayD::zeros(IxDyn(&[2, 0])));
        assert!(tape.softmax(empty, 1).is_err());
    }

    #[test]
    fn deterministic_forward_backward() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(random(&[7, 9], 22).mapv(|v| v as f32));
            let w = tape.leaf(random(&[9, 5], 23).mapv(|v| v as f32));
            let y = tape.matmul(x, w).unwrap();
            let a = tape.gelu(y);
            let m = tape.mean_all(a);
            let grads = tape.backward(m).unwrap();
            (
                tape.value(m).iter().copied().collect::<Vec<f32>>(),
                grads.get(w).unwrap().iter().copied().collect::<Vec<f32>>(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
