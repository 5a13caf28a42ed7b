//! Forward operations. Each records a graph node when an input is linked.

use super::kernels::{self, ConvGeom};
use super::{Op, Result, Tensor, TensorError};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn need_scalar(op: &'static str, t: &Tensor) -> Result<()> {
    if !t.is_scalar() {
        return Err(TensorError::NotScalar {
            op,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn need_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(TensorError::Invalid {
            op,
            msg: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

impl Tensor {
    fn zip_with(&self, other: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op.name(), self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_op(op, &[self, other], self.shape().to_vec(), data)
    }

    fn map_unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data().iter().map(|&a| f(a)).collect();
        Tensor::from_op(op, &[self], self.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, Op::Mul, |a, b| a * b)
    }

    /// Multiplies every entry by the scalar tensor `s`.
    pub fn scale(&self, s: &Tensor) -> Result<Tensor> {
        need_scalar("scale", s)?;
        let k = s.item();
        let data = self.data().iter().map(|&a| a * k).collect();
        Tensor::from_op(Op::Scale, &[self, s], self.shape().to_vec(), data)
    }

    pub fn mul_const(&self, c: f64) -> Result<Tensor> {
        self.map_unary(Op::MulConst(c), |a| a * c)
    }

    pub fn add_const(&self, c: f64) -> Result<Tensor> {
        self.map_unary(Op::AddConst(c), |a| a + c)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_const(-1.0)
    }

    /// `max(0, x)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&self) -> Result<Tensor> {
        self.map_unary(Op::Relu, |a| a.max(0.0))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map_unary(Op::Sigmoid, sigmoid)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.map_unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Result<Tensor> {
        self.map_unary(Op::Ln, f64::ln)
    }

    pub fn powf(&self, p: f64) -> Result<Tensor> {
        self.map_unary(Op::Powf(p), |a| a.powf(p))
    }

    pub fn sum(&self) -> Result<Tensor> {
        Tensor::from_op(Op::Sum, &[self], Vec::new(), vec![self.data().iter().sum()])
    }

    /// Mean over all entries (global average pooling for a single map).
    pub fn gap(&self) -> Result<Tensor> {
        self.sum()?.mul_const(1.0 / self.len() as f64)
    }

    /// Broadcasts a scalar to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        need_scalar("expand", self)?;
        let n = shape.iter().product();
        Tensor::from_op(Op::Expand, &[self], shape.to_vec(), vec![self.item(); n])
    }

    /// Inner product of two equal-shape tensors (flattened).
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("dot", self, other)?;
        let v = self.data().iter().zip(other.data()).map(|(a, b)| a * b).sum();
        Tensor::from_op(Op::Dot, &[self, other], Vec::new(), vec![v])
    }

    pub fn l2_norm(&self) -> Result<Tensor> {
        self.dot(self)?.powf(0.5)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op(Op::Reshape, &[self], shape.to_vec(), self.to_vec())
    }

    /// Largest entry; ties go to the lowest flat index, which also receives
    /// the whole gradient.
    pub fn max_all(&self) -> Result<Tensor> {
        let (index, value) = self
            .data()
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        Tensor::from_op(Op::MaxAll { index }, &[self], Vec::new(), vec![value])
    }

    /// Per-channel sum of a `C×H×W` tensor, giving a length-`C` vector.
    pub fn channel_sum(&self) -> Result<Tensor> {
        need_rank("channel_sum", self, 3)?;
        let c = self.shape()[0];
        let plane = self.shape()[1] * self.shape()[2];
        let data = self.data().chunks(plane).map(|ch| ch.iter().sum()).collect();
        Tensor::from_op(Op::ChannelSum, &[self], vec![c], data)
    }

    /// Per-channel mean of a `C×H×W` tensor.
    pub fn channel_mean(&self) -> Result<Tensor> {
        need_rank("channel_mean", self, 3)?;
        let plane = self.shape()[1] * self.shape()[2];
        self.channel_sum()?.mul_const(1.0 / plane as f64)
    }

    /// Broadcasts a length-`C` vector over an `H×W` plane.
    pub fn channel_expand(&self, h: usize, w: usize) -> Result<Tensor> {
        need_rank("channel_expand", self, 1)?;
        let c = self.len();
        let data = self.data().iter().flat_map(|&v| std::iter::repeat_n(v, h * w)).collect();
        Tensor::from_op(Op::ChannelExpand, &[self], vec![c, h, w], data)
    }

    /// `self · v` for a matrix `self` of shape `m×n`.
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        need_rank("matvec", self, 2)?;
        let (m, n) = (self.shape()[0], self.shape()[1]);
        if v.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let data = kernels::matvec(self.data(), v.data(), m, n);
        Tensor::from_op(Op::MatVec, &[self, v], vec![m], data)
    }

    /// `selfᵀ · u` for a matrix `self` of shape `m×n`.
    pub fn mattvec(&self, u: &Tensor) -> Result<Tensor> {
        need_rank("mattvec", self, 2)?;
        let (m, n) = (self.shape()[0], self.shape()[1]);
        if u.shape() != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "mattvec",
                lhs: self.shape().to_vec(),
                rhs: u.shape().to_vec(),
            });
        }
        let data = kernels::mattvec(self.data(), u.data(), m, n);
        Tensor::from_op(Op::MatTVec, &[self, u], vec![n], data)
    }

    /// Outer product of two vectors.
    pub fn outer(&self, v: &Tensor) -> Result<Tensor> {
        need_rank("outer", self, 1)?;
        need_rank("outer", v, 1)?;
        let data = kernels::outer(self.data(), v.data());
        Tensor::from_op(Op::Outer, &[self, v], vec![self.len(), v.len()], data)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn conv_geom(op: &'static str, x_shape: &[usize], k_shape: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    if x_shape.len() != 3 || k_shape.len() != 4 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("input must be C×H×W and kernel O×C×kh×kw, got {x_shape:?} and {k_shape:?}"),
        });
    }
    if x_shape[0] != k_shape[1] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x_shape.to_vec(),
            rhs: k_shape.to_vec(),
        });
    }
    if stride == 0 {
        return Err(TensorError::Invalid {
            op,
            msg: "stride must be at least 1".into(),
        });
    }
    let g = ConvGeom {
        c_in: x_shape[0],
        h: x_shape[1],
        w: x_shape[2],
        c_out: k_shape[0],
        kh: k_shape[2],
        kw: k_shape[3],
        stride,
        padding,
    };
    if g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding {
        return Err(TensorError::Invalid {
            op,
            msg: format!("kernel {}×{} exceeds padded input {}×{}", g.kh, g.kw, g.h + 2 * padding, g.w + 2 * padding),
        });
    }
    Ok(g)
}

/// 2-D cross-correlation of a `C_in×H×W` input with a `C_out×C_in×kh×kw`
/// kernel plus a per-output-channel bias.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let y = conv2d_nobias(input, kernel, stride, padding)?;
    if bias.shape() != [kernel.shape()[0]] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: kernel.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    y.add(&bias.channel_expand(y.shape()[1], y.shape()[2])?)
}

pub(crate) fn conv2d_nobias(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geom("conv2d", input.shape(), kernel.shape(), stride, padding)?;
    let data = kernels::conv2d(input.data(), kernel.data(), &g);
    Tensor::from_op(
        Op::Conv2d { stride, padding },
        &[input, kernel],
        vec![g.c_out, g.out_h(), g.out_w()],
        data,
    )
}

/// Gradient of `conv2d` wrt an input of spatial size `h×w`, as an operation
/// of `(upstream, kernel)`.
pub(crate) fn conv2d_input_grad(
    upstream: &Tensor,
    kernel: &Tensor,
    h: usize,
    w: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let ks = kernel.shape();
    let g = conv_geom("conv2d_input_grad", &[ks[1], h, w], ks, stride, padding)?;
    check_out_shape("conv2d_input_grad", upstream, &g)?;
    let data = kernels::conv2d_input_grad(upstream.data(), kernel.data(), &g);
    Tensor::from_op(Op::ConvInputGrad { stride, padding }, &[upstream, kernel], vec![g.c_in, h, w], data)
}

/// Gradient of `conv2d` wrt a `kh×kw` kernel, as an operation of
/// `(input, upstream)`.
pub(crate) fn conv2d_kernel_grad(
    input: &Tensor,
    upstream: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let c_out = upstream.shape().first().copied().unwrap_or(0);
    let k_shape = [c_out, input.shape().first().copied().unwrap_or(0), kh, kw];
    let g = conv_geom("conv2d_kernel_grad", input.shape(), &k_shape, stride, padding)?;
    check_out_shape("conv2d_kernel_grad", upstream, &g)?;
    let data = kernels::conv2d_kernel_grad(input.data(), upstream.data(), &g);
    Tensor::from_op(Op::ConvKernelGrad { stride, padding }, &[input, upstream], k_shape.to_vec(), data)
}

fn check_out_shape(op: &'static str, upstream: &Tensor, g: &ConvGeom) -> Result<()> {
    let expected = [g.c_out, g.out_h(), g.out_w()];
    if upstream.shape() != expected {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: expected.to_vec(),
            rhs: upstream.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 1], &[3.0]);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d(&x, &k, &t(&[1], &[0.0]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn conv_constant_sums() {
        let y = conv2d(&Tensor::ones(&[1, 3, 3]), &Tensor::ones(&[1, 1, 2, 2]), &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::ones(&[2, 3, 3]);
        assert!(conv2d(&x, &Tensor::ones(&[1, 1, 2, 2]), &Tensor::zeros(&[1]), 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::ones(&[1, 2, 5, 5]), &Tensor::zeros(&[1]), 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::ones(&[1, 2, 2, 2]), &Tensor::zeros(&[2]), 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::ones(&[1, 2, 2, 2]), &Tensor::zeros(&[1]), 0, 0).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::from_slice(&[1.0, 2.0]);
        let b = Tensor::from_slice(&[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.mul(&Tensor::zeros(&[2])).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(a.sub(&a).unwrap().data(), &[0.0, 0.0]);
        assert!(a.add(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn pointwise_examples() {
        let r = Tensor::from_slice(&[-1.0, 0.0, 2.0]).relu().unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Tensor::from_slice(&[0.0]).sigmoid().unwrap().data(), &[0.5]);
        let s8 = Tensor::from_slice(&[8.0]).sigmoid().unwrap().item();
        assert!((s8 - 0.999665).abs() < 1e-6);
    }

    #[test]
    fn reduction_examples() {
        let d = Tensor::from_slice(&[1.0, 0.5]).dot(&Tensor::from_slice(&[0.2, 0.4])).unwrap();
        assert!((d.item() - 0.4).abs() < 1e-15);
        assert_eq!(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).gap().unwrap().item(), 2.5);
        assert_eq!(Tensor::from_slice(&[3.0, 4.0]).l2_norm().unwrap().item(), 5.0);
        assert!(Tensor::from_slice(&[1.0]).dot(&Tensor::from_slice(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn overflow_is_an_error() {
        let err = Tensor::from_slice(&[1000.0]).exp().unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "exp" });
    }

    #[test]
    fn max_all_breaks_ties_low() {
        let m = Tensor::from_slice(&[1.0, 3.0, 3.0]).variable().max_all().unwrap();
        assert_eq!(m.item(), 3.0);
        match &m.node().unwrap().op {
            Op::MaxAll { index } => assert_eq!(*index, 1),
            other => panic!("unexpected op {other:?}"),
        }
    }

    #[test]
    fn plain_inputs_record_no_graph() {
        let a = Tensor::from_slice(&[1.0, 2.0]);
        assert!(!a.mul(&a).unwrap().requires_grad());
        assert!(a.variable().mul(&a).unwrap().requires_grad());
    }
}
