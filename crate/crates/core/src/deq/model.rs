use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{eval_affine, ExprGraph, GradResult, NodeId, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

/// Elementwise activation σ of the layer transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Tanh,
    Relu,
    /// Linear test mode.
    Identity,
}

impl Nonlinearity {
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Relu => v.max(T::zero()),
            Nonlinearity::Identity => v,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Nonlinearity::Tanh => 0,
            Nonlinearity::Relu => 1,
            Nonlinearity::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Nonlinearity::Tanh),
            1 => Some(Nonlinearity::Relu),
            2 => Some(Nonlinearity::Identity),
            _ => None,
        }
    }
}

/// Names of the five parameter tensors, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamName {
    W,
    U,
    B,
    V,
    C,
}

impl ParamName {
    pub const ALL: [ParamName; 5] = [
        ParamName::W,
        ParamName::U,
        ParamName::B,
        ParamName::V,
        ParamName::C,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamName::W => "W",
            ParamName::U => "U",
            ParamName::B => "b",
            ParamName::V => "head_V",
            ParamName::C => "head_c",
        }
    }
}

/// Weight-tied layer `f(z; x) = σ(W·z + U·x + b)` with linear head `V·z + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeqModel<T> {
    pub w: Tensor<T>,
    pub u: Tensor<T>,
    pub b: Tensor<T>,
    pub v: Tensor<T>,
    pub c: Tensor<T>,
    pub nonlinearity: Nonlinearity,
    /// Target bound on the spectral norm of `w`, in (0, 1].
    pub gamma: T,
}

impl<T: Scalar> DeqModel<T> {
    pub fn new(
        w: Tensor<T>,
        u: Tensor<T>,
        b: Tensor<T>,
        v: Tensor<T>,
        c: Tensor<T>,
        nonlinearity: Nonlinearity,
        gamma: T,
    ) -> Result<Self> {
        if !w.is_matrix() || w.rows() != w.cols() {
            return Err(dim_err("DeqModel", "W", w.shape(), "[d, d]"));
        }
        let d = w.rows();
        if !u.is_matrix() || u.rows() != d {
            return Err(dim_err("DeqModel", "U", u.shape(), format!("[{d}, l]")));
        }
        if b.shape() != [d] {
            return Err(dim_err("DeqModel", "b", b.shape(), format!("[{d}]")));
        }
        if !v.is_matrix() || v.cols() != d {
            return Err(dim_err("DeqModel", "head_V", v.shape(), format!("[C, {d}]")));
        }
        if c.shape() != [v.rows()] {
            return Err(dim_err("DeqModel", "head_c", c.shape(), format!("[{}]", v.rows())));
        }
        if !(gamma > T::zero() && gamma <= T::one()) {
            return Err(Error::Contract(format!("contraction factor {gamma} outside (0, 1]")));
        }
        let m = Self {
            w,
            u,
            b,
            v,
            c,
            nonlinearity,
            gamma,
        };
        for name in ParamName::ALL {
            if !m.param(name).all_finite() {
                return Err(Error::NonFinite(format!("parameter {}", name.as_str())));
            }
        }
        Ok(m)
    }

    /// Small uniform initialization in `[−1/√d, 1/√d]` for every parameter.
    pub fn init_random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        classes: usize,
        nonlinearity: Nonlinearity,
        gamma: T,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut draw = |rows: usize, cols: Option<usize>| {
            let n = rows * cols.unwrap_or(1);
            let data: Vec<T> = (0..n)
                .map(|_| T::lit(rng.random_range(-bound..=bound)))
                .collect();
            match cols {
                Some(c) => Tensor::matrix(rows, c, data),
                None => Ok(Tensor::vector(data)),
            }
        };
        let w = draw(hidden_dim, Some(hidden_dim))?;
        let u = draw(hidden_dim, Some(input_dim))?;
        let b = draw(hidden_dim, None)?;
        let v = draw(classes, Some(hidden_dim))?;
        let c = draw(classes, None)?;
        Self::new(w, u, b, v, c, nonlinearity, gamma)
    }

    pub fn input_dim(&self) -> usize {
        self.u.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn classes(&self) -> usize {
        self.v.rows()
    }

    pub fn param(&self, name: ParamName) -> &Tensor<T> {
        match name {
            ParamName::W => &self.w,
            ParamName::U => &self.u,
            ParamName::B => &self.b,
            ParamName::V => &self.v,
            ParamName::C => &self.c,
        }
    }

    pub fn param_mut(&mut self, name: ParamName) -> &mut Tensor<T> {
        match name {
            ParamName::W => &mut self.w,
            ParamName::U => &mut self.u,
            ParamName::B => &mut self.b,
            ParamName::V => &mut self.v,
            ParamName::C => &mut self.c,
        }
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for name in ParamName::ALL {
            for v in self.param(name).data() {
                for byte in v.to_f64_lossy().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> DeqModel<U> {
        DeqModel {
            w: self.w.cast(),
            u: self.u.cast(),
            b: self.b.cast(),
            v: self.v.cast(),
            c: self.c.cast(),
            nonlinearity: self.nonlinearity,
            gamma: U::lit(self.gamma.to_f64_lossy()),
        }
    }

    /// `σ(W·z + U·x + b)`.
    pub fn layer_apply(&self, z: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let wz_b = eval_affine(&self.w, z, &self.b)?;
        let pre = eval_affine(&self.u, x, &wz_b)?;
        let nl = self.nonlinearity;
        Ok(pre.map(|v| nl.apply(v)))
    }

    /// Logits `V·z + c`.
    pub fn head_apply(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        eval_affine(&self.v, z, &self.c)
    }

    /// Returns a copy whose `W` has spectral norm at most `gamma`.
    pub fn spectral_rescale(&self) -> Self {
        let s = spectral_norm(&self.w);
        let mut out = self.clone();
        if s > self.gamma {
            let k = self.gamma / s;
            out.w = self.w.scale(k);
        }
        out
    }

    /// Registers every parameter as a graph leaf.
    pub fn to_graph(&self, g: &mut ExprGraph<T>, differentiable: bool) -> Result<ModelNodes> {
        let mut leaf = |t: &Tensor<T>| {
            if differentiable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        Ok(ModelNodes {
            w: leaf(&self.w)?,
            u: leaf(&self.u)?,
            b: leaf(&self.b)?,
            v: leaf(&self.v)?,
            c: leaf(&self.c)?,
            nonlinearity: self.nonlinearity,
        })
    }
}

/// Graph leaves holding one model's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ModelNodes {
    pub w: NodeId,
    pub u: NodeId,
    pub b: NodeId,
    pub v: NodeId,
    pub c: NodeId,
    pub nonlinearity: Nonlinearity,
}

impl ModelNodes {
    pub fn node(&self, name: ParamName) -> NodeId {
        match name {
            ParamName::W => self.w,
            ParamName::U => self.u,
            ParamName::B => self.b,
            ParamName::V => self.v,
            ParamName::C => self.c,
        }
    }

    /// Graph form of [`DeqModel::layer_apply`], same evaluation order.
    pub fn layer<T: Scalar>(&self, g: &mut ExprGraph<T>, z: NodeId, x: NodeId) -> Result<NodeId> {
        let wz_b = g.affine(self.w, z, self.b)?;
        let pre = g.affine(self.u, x, wz_b)?;
        match self.nonlinearity {
            Nonlinearity::Tanh => g.tanh(pre),
            Nonlinearity::Relu => g.relu(pre),
            Nonlinearity::Identity => Ok(pre),
        }
    }

    pub fn head<T: Scalar>(&self, g: &mut ExprGraph<T>, z: NodeId) -> Result<NodeId> {
        g.affine(self.v, z, self.c)
    }

    /// `steps` damped iterations `z ← (1 − λ)·z + λ·f(z; x)` starting at `z0`.
    pub fn unroll<T: Scalar>(
        &self,
        g: &mut ExprGraph<T>,
        z0: NodeId,
        x: NodeId,
        steps: usize,
        damping: T,
    ) -> Result<NodeId> {
        let mut z = z0;
        for _ in 0..steps {
            let f = self.layer(g, z, x)?;
            z = g.lerp(z, f, damping)?;
        }
        Ok(z)
    }
}

/// Gradients for each parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub w: Tensor<T>,
    pub u: Tensor<T>,
    pub b: Tensor<T>,
    pub v: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn from_result(result: &GradResult<T>, nodes: &ModelNodes) -> Self {
        Self {
            w: result.grad(nodes.w).clone(),
            u: result.grad(nodes.u).clone(),
            b: result.grad(nodes.b).clone(),
            v: result.grad(nodes.v).clone(),
            c: result.grad(nodes.c).clone(),
        }
    }

    pub fn get(&self, name: ParamName) -> &Tensor<T> {
        match name {
            ParamName::W => &self.w,
            ParamName::U => &self.u,
            ParamName::B => &self.b,
            ParamName::V => &self.v,
            ParamName::C => &self.c,
        }
    }
}

/// Largest singular value of a matrix by power iteration on `WᵀW`
/// (at most 100 steps, stopping once the estimate moves less than 1e-10
/// relative).
pub fn spectral_norm<T: Scalar>(w: &Tensor<T>) -> T {
    let n = w.cols();
    if w.max_abs() == T::zero() {
        return T::zero();
    }
    // Deterministic start with no special alignment to coordinate axes.
    let mut v = Tensor::vector(
        (0..n)
            .map(|i| T::lit(1.0 + 0.5 * ((i as f64) * 1.618_033_988_75).sin()))
            .collect(),
    );
    let nv = v.norm2();
    v = v.scale(T::one() / nv);
    let mut sigma = T::zero();
    let tol = T::lit(1e-10);
    for _ in 0..100 {
        let wv = w.matvec(&v).expect("square shapes");
        let wtwv = w.matvec_t(&wv).expect("square shapes");
        let norm = wtwv.norm2();
        if norm == T::zero() {
            break;
        }
        let next = wv.norm2();
        v = wtwv.scale(T::one() / norm);
        let done = (next - sigma).abs() <= tol * next;
        sigma = next;
        if done {
            break;
        }
    }
    // One more Rayleigh evaluation with the final direction.
    let wv = w.matvec(&v).expect("square shapes");
    sigma.max(wv.norm2())
}
