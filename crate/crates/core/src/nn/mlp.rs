use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::field::Field;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-x).exp());
                sig * (1.0 + x * (1.0 - sig))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

fn default_embed_dim() -> usize {
    32
}

/// Architecture of a conditioned multilayer perceptron.
///
/// `n_scalars` conditioning scalars (diffusion time, warmth) are embedded
/// sinusoidally with `embed_dim` features each and modulate every hidden layer
/// through a learned shift and scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub n_scalars: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument("input and output dims must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "hidden_dims must be non-empty with every entry >= 1".into(),
            ));
        }
        if self.n_scalars > 0 && (self.embed_dim < 2 || self.embed_dim % 2 != 0) {
            return Err(Error::InvalidArgument("embed_dim must be even and >= 2".into()));
        }
        Ok(())
    }

    fn cond_dim(&self) -> usize {
        self.n_scalars * self.embed_dim
    }
}

/// Dense affine map `y = x Wᵀ + b` over a slice of the flat parameter vector.
///
/// `W` is stored row-major with shape `(out_dim, in_dim)`, followed by `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub offset: usize,
}

impl Linear {
    pub fn n_params(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }

    fn weight<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let len = self.out_dim * self.in_dim;
        ArrayView2::from_shape((self.out_dim, self.in_dim), &params[self.offset..self.offset + len])
            .expect("layout is consistent")
    }

    fn bias<'a>(&self, params: &'a [f64]) -> ArrayView1<'a, f64> {
        let start = self.offset + self.out_dim * self.in_dim;
        ArrayView1::from(&params[start..start + self.out_dim])
    }

    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight(params).t());
        y += &self.bias(params);
        y
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let w_len = self.out_dim * self.in_dim;
        {
            let (gw, gb) = grads[self.offset..self.offset + self.n_params()].split_at_mut(w_len);
            let mut gw = ArrayViewMut2::from_shape((self.out_dim, self.in_dim), gw)
                .expect("layout is consistent");
            general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut gw);
            for (g, col) in gb.iter_mut().zip(dy.axis_iter(Axis(1))) {
                *g += col.sum();
            }
        }
        dy.dot(&self.weight(params))
    }

    fn init(&self, params: &mut [f64], rng: &mut Rng) {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        let len = self.out_dim * self.in_dim;
        for p in &mut params[self.offset..self.offset + len] {
            *p = rng.random_range(-bound..bound);
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    dense: Linear,
    film: Option<Linear>,
}

/// Intermediate values recorded by [`Mlp::forward_train`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct Tape {
    embed: Option<Array2<f64>>,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    modulated: Vec<Array2<f64>>,
    gamma: Vec<Option<Array2<f64>>>,
}

/// Concrete parameter layout for an [`MlpSpec`].
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    blocks: Vec<Block>,
    head: Linear,
    n_params: usize,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(spec.hidden_dims.len());
        let mut in_dim = spec.input_dim;
        for &out_dim in &spec.hidden_dims {
            let dense = Linear { in_dim, out_dim, offset };
            offset += dense.n_params();
            let film = (spec.n_scalars > 0).then(|| {
                let film = Linear {
                    in_dim: spec.cond_dim(),
                    out_dim: 2 * out_dim,
                    offset,
                };
                offset += film.n_params();
                film
            });
            blocks.push(Block { dense, film });
            in_dim = out_dim;
        }
        let head = Linear {
            in_dim,
            out_dim: spec.output_dim,
            offset,
        };
        offset += head.n_params();
        Ok(Self {
            spec,
            blocks,
            head,
            n_params: offset,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Uniform fan-in initialisation for dense weights; biases and the
    /// conditioning maps start at zero so an untrained network ignores the scalars.
    pub fn init_params(&self, rng: &mut Rng) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params];
        for block in &self.blocks {
            block.dense.init(&mut params, rng);
        }
        self.head.init(&mut params, rng);
        params
    }

    fn check(&self, params: &[f64], input: &ArrayView2<f64>, scalars: &ArrayView2<f64>) -> Result<()> {
        if params.len() != self.n_params {
            return Err(shape_err("parameter vector", self.n_params, params.len()));
        }
        if input.ncols() != self.spec.input_dim {
            return Err(shape_err("network input", self.spec.input_dim, input.ncols()));
        }
        if self.spec.n_scalars > 0
            && (scalars.ncols() != self.spec.n_scalars || scalars.nrows() != input.nrows())
        {
            return Err(Error::Shape(format!(
                "conditioning scalars: expected {}x{}, got {}x{}",
                input.nrows(),
                self.spec.n_scalars,
                scalars.nrows(),
                scalars.ncols()
            )));
        }
        Ok(())
    }

    /// Batched forward pass. `input` is `(batch, input_dim)`, `scalars` is
    /// `(batch, n_scalars)` (ignored when the network has no conditioning).
    pub fn forward_batch(
        &self,
        params: &[f64],
        input: ArrayView2<f64>,
        scalars: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        self.check(params, &input, &scalars)?;
        let embed = (self.spec.n_scalars > 0).then(|| sinusoidal_embedding(scalars, self.spec.embed_dim));
        let act = self.spec.activation;
        let mut h = input.to_owned();
        for block in &self.blocks {
            let mut z = block.dense.forward(params, h.view());
            if let (Some(film), Some(e)) = (&block.film, &embed) {
                let c = film.forward(params, e.view());
                let out = block.dense.out_dim;
                z.zip_mut_with(&c.slice(s![.., ..out]), |zi, &g| *zi *= 1.0 + g);
                z += &c.slice(s![.., out..]);
            }
            z.mapv_inplace(|v| act.apply(v));
            h = z;
        }
        Ok(self.head.forward(params, h.view()))
    }

    pub fn forward_train(
        &self,
        params: &[f64],
        input: ArrayView2<f64>,
        scalars: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Tape)> {
        self.check(params, &input, &scalars)?;
        let embed = (self.spec.n_scalars > 0).then(|| sinusoidal_embedding(scalars, self.spec.embed_dim));
        let act = self.spec.activation;
        let n = self.blocks.len();
        let mut tape = Tape {
            embed: None,
            inputs: Vec::with_capacity(n + 1),
            pre: Vec::with_capacity(n),
            modulated: Vec::with_capacity(n),
            gamma: Vec::with_capacity(n),
        };
        let mut h = input.to_owned();
        for block in &self.blocks {
            let z = block.dense.forward(params, h.view());
            let (zz, gamma) = match (&block.film, &embed) {
                (Some(film), Some(e)) => {
                    let c = film.forward(params, e.view());
                    let out = block.dense.out_dim;
                    let gamma = c.slice(s![.., ..out]).to_owned();
                    let mut zz = &z * &gamma.mapv(|g| 1.0 + g);
                    zz += &c.slice(s![.., out..]);
                    (zz, Some(gamma))
                }
                _ => (z.clone(), None),
            };
            let a = zz.mapv(|v| act.apply(v));
            tape.inputs.push(std::mem::replace(&mut h, a));
            tape.pre.push(z);
            tape.modulated.push(zz);
            tape.gamma.push(gamma);
        }
        let out = self.head.forward(params, h.view());
        tape.inputs.push(h);
        tape.embed = embed;
        Ok((out, tape))
    }

    /// Reverse pass for `Loss = <upstream, output>`, summed over the batch.
    /// Returns the parameter gradient and the gradient with respect to the input.
    pub fn backward_batch(
        &self,
        params: &[f64],
        tape: &Tape,
        upstream: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        if upstream.ncols() != self.spec.output_dim {
            return Err(shape_err("upstream gradient", self.spec.output_dim, upstream.ncols()));
        }
        let last = tape.inputs.last().expect("tape records the head input");
        if upstream.nrows() != last.nrows() {
            return Err(shape_err("upstream batch", last.nrows(), upstream.nrows()));
        }
        let act = self.spec.activation;
        let mut grads = vec![0.0; self.n_params];
        let mut dh = self.head.backward(params, last.view(), upstream, &mut grads);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let mut dzz = dh;
            dzz.zip_mut_with(&tape.modulated[i], |d, &zz| *d *= act.derivative(zz));
            let dz = match (&block.film, &tape.gamma[i], &tape.embed) {
                (Some(film), Some(gamma), Some(e)) => {
                    let out = block.dense.out_dim;
                    let mut dc = Array2::zeros((dzz.nrows(), 2 * out));
                    {
                        let mut dg = dc.slice_mut(s![.., ..out]);
                        dg.assign(&dzz);
                        dg *= &tape.pre[i];
                    }
                    dc.slice_mut(s![.., out..]).assign(&dzz);
                    film.backward(params, e.view(), dc.view(), &mut grads);
                    let mut dz = dzz;
                    dz.zip_mut_with(gamma, |d, &g| *d *= 1.0 + g);
                    dz
                }
                _ => dzz,
            };
            dh = block.dense.backward(params, tape.inputs[i].view(), dz.view(), &mut grads);
        }
        Ok((grads, dh))
    }
}

/// Sinusoidal features for scalars in `[0, 1]`: for each scalar, `dim / 2`
/// sines followed by `dim / 2` cosines at geometrically spaced frequencies.
pub fn sinusoidal_embedding(scalars: ArrayView2<f64>, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let n_s = scalars.ncols();
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10_000f64).ln() * k as f64 / half as f64).exp())
        .collect();
    let mut out = Array2::zeros((scalars.nrows(), n_s * dim));
    for (row, mut dst) in scalars.outer_iter().zip(out.outer_iter_mut()) {
        for (j, &u) in row.iter().enumerate() {
            let base = j * dim;
            for (k, &f) in freqs.iter().enumerate() {
                let angle = 1000.0 * u * f;
                dst[base + k] = angle.sin();
                dst[base + half + k] = angle.cos();
            }
        }
    }
    out
}

fn check_scalars(spec: &MlpSpec, scalars: &[f64]) -> Result<()> {
    if scalars.len() != spec.n_scalars {
        return Err(shape_err("conditioning scalars", spec.n_scalars, scalars.len()));
    }
    if let Some(u) = scalars.iter().find(|u| !(0.0..=1.0).contains(*u)) {
        return Err(Error::InvalidArgument(format!("conditioning scalar {u} outside [0, 1]")));
    }
    Ok(())
}

/// Single-sample forward pass.
pub fn forward(spec: &MlpSpec, params: &[f64], input: &Field, scalars: &[f64]) -> Result<Field> {
    let mlp = Mlp::new(spec.clone())?;
    check_scalars(spec, scalars)?;
    let x = ArrayView2::from_shape((1, input.len()), input.data())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let u = ArrayView2::from_shape((1, scalars.len()), scalars).map_err(|e| Error::Shape(e.to_string()))?;
    let y = mlp.forward_batch(params, x, u)?;
    Field::from_vec(y.into_raw_vec_and_offset().0)
}

/// Single-sample parameter gradient of `<upstream, forward(...)>`.
pub fn backward(
    spec: &MlpSpec,
    params: &[f64],
    input: &Field,
    scalars: &[f64],
    upstream: &Field,
) -> Result<Vec<f64>> {
    let mlp = Mlp::new(spec.clone())?;
    check_scalars(spec, scalars)?;
    if upstream.len() != spec.output_dim {
        return Err(shape_err("upstream gradient", spec.output_dim, upstream.len()));
    }
    let x = ArrayView2::from_shape((1, input.len()), input.data())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let u = ArrayView2::from_shape((1, scalars.len()), scalars).map_err(|e| Error::Shape(e.to_string()))?;
    let (_, tape) = mlp.forward_train(params, x, u)?;
    let g = ArrayView2::from_shape((1, upstream.len()), upstream.data()).expect("checked above");
    Ok(mlp.backward_batch(params, &tape, g)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn spec(input: usize, hidden: &[usize], output: usize, act: Activation, n_scalars: usize) -> MlpSpec {
        MlpSpec {
            input_dim: input,
            hidden_dims: hidden.to_vec(),
            output_dim: output,
            activation: act,
            embed_dim: 4,
            n_scalars,
        }
    }

    #[test]
    fn zero_weights_give_bias_only_output() {
        let sp = spec(3, &[5], 2, Activation::Silu, 1);
        let mlp = Mlp::new(sp.clone()).unwrap();
        let mut params = vec![0.0; mlp.n_params()];
        let y = forward(&sp, &params, &Field::from_vec(vec![1.0, -2.0, 3.0]).unwrap(), &[0.4]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        // head bias lives in the last output_dim slots
        let n = params.len();
        params[n - 2] = 0.25;
        params[n - 1] = -1.5;
        let y = forward(&sp, &params, &Field::from_vec(vec![1.0, -2.0, 3.0]).unwrap(), &[0.4]).unwrap();
        assert_eq!(y.data(), &[0.25, -1.5]);
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let lin = Linear { in_dim: 3, out_dim: 3, offset: 0 };
        let mut params = vec![0.0; lin.n_params()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let x = Array2::from_shape_vec((1, 3), vec![0.5, -7.0, 2.25]).unwrap();
        let y = lin.forward(&params, x.view());
        assert_eq!(y.as_slice().unwrap(), &[0.5, -7.0, 2.25]);
    }

    #[test]
    fn scalar_linear_gradient_is_input() {
        // y = w x with x = 3 and upstream 1 gives dw = 3, db = 1
        let lin = Linear { in_dim: 1, out_dim: 1, offset: 0 };
        let params = vec![0.7, 0.0];
        let x = Array2::from_elem((1, 1), 3.0);
        let dy = Array2::from_elem((1, 1), 1.0);
        let mut grads = vec![0.0; 2];
        let dx = lin.backward(&params, x.view(), dy.view(), &mut grads);
        assert_eq!(grads, vec![3.0, 1.0]);
        assert_eq!(dx[[0, 0]], 0.7);
    }

    /// Straight-line forward pass written with explicit loops, independent of
    /// the ndarray path.
    fn reference_forward(sp: &MlpSpec, params: &[f64], x: &[f64], scalars: &[f64]) -> Vec<f64> {
        let act = |v: f64| match sp.activation {
            Activation::Relu => v.max(0.0),
            Activation::Silu => v / (1.0 + (-v).exp()),
            Activation::Tanh => v.tanh(),
        };
        let mut emb = Vec::new();
        for &u in scalars {
            let half = sp.embed_dim / 2;
            let mut sin = Vec::new();
            let mut cos = Vec::new();
            for k in 0..half {
                let f = (-(10_000f64).ln() * k as f64 / half as f64).exp();
                sin.push((1000.0 * u * f).sin());
                cos.push((1000.0 * u * f).cos());
            }
            emb.extend(sin);
            emb.extend(cos);
        }
        let mut off = 0;
        let mut h = x.to_vec();
        let affine = |off: &mut usize, inp: &[f64], out: usize| -> Vec<f64> {
            let n_in = inp.len();
            let mut y = vec![0.0; out];
            for o in 0..out {
                let mut acc = 0.0;
                for i in 0..n_in {
                    acc += params[*off + o * n_in + i] * inp[i];
                }
                y[o] = acc + params[*off + out * n_in + o];
            }
            *off += out * (n_in + 1);
            y
        };
        for &width in &sp.hidden_dims {
            let mut z = affine(&mut off, &h, width);
            if sp.n_scalars > 0 {
                let c = affine(&mut off, &emb, 2 * width);
                for j in 0..width {
                    z[j] = z[j] * (1.0 + c[j]) + c[width + j];
                }
            }
            h = z.into_iter().map(act).collect();
        }
        affine(&mut off, &h, sp.output_dim)
    }

    #[test]
    fn forward_matches_hand_traced_chain() {
        let sp = spec(2, &[4], 2, Activation::Tanh, 0);
        let mlp = Mlp::new(sp.clone()).unwrap();
        let params = mlp.init_params(&mut stream(17, 0));
        let y = forward(&sp, &params, &Field::from_vec(vec![1.0, -1.0]).unwrap(), &[]).unwrap();
        let r = reference_forward(&sp, &params, &[1.0, -1.0], &[]);
        for (a, b) in y.data().iter().zip(&r) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn conditioned_forward_matches_reference() {
        let sp = spec(3, &[6, 5], 2, Activation::Silu, 2);
        let mlp = Mlp::new(sp.clone()).unwrap();
        let mut params = mlp.init_params(&mut stream(3, 1));
        // give the conditioning maps non-zero weights
        let mut rng = stream(3, 2);
        for p in params.iter_mut() {
            if *p == 0.0 {
                *p = rng.random_range(-0.3..0.3);
            }
        }
        let x = [0.3, -1.2, 0.8];
        let u = [0.25, 0.9];
        let y = forward(&sp, &params, &Field::from_vec(x.to_vec()).unwrap(), &u).unwrap();
        let r = reference_forward(&sp, &params, &x, &u);
        for (a, b) in y.data().iter().zip(&r) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let sp = spec(2, &[3], 2, Activation::Silu, 1);
        let mlp = Mlp::new(sp.clone()).unwrap();
        let params = mlp.init_params(&mut stream(1, 0));
        let g = backward(
            &sp,
            &params,
            &Field::from_vec(vec![0.5, 0.1]).unwrap(),
            &[0.5],
            &Field::zeros(&[2]),
        )
        .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors_are_reported() {
        let sp = spec(2, &[3], 1, Activation::Silu, 1);
        let mlp = Mlp::new(sp.clone()).unwrap();
        let params = vec![0.0; mlp.n_params()];
        assert!(matches!(
            forward(&sp, &params, &Field::zeros(&[3]), &[0.1]),
            Err(Error::Shape(_))
        ));
        assert!(forward(&sp, &params, &Field::zeros(&[2]), &[]).is_err());
        assert!(forward(&sp, &params, &Field::zeros(&[2]), &[1.5]).is_err());
        assert!(backward(&sp, &params, &Field::zeros(&[2]), &[0.1], &Field::zeros(&[2])).is_err());
        assert!(forward(&sp, &params[1..], &Field::zeros(&[2]), &[0.1]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(spec(2, &[], 1, Activation::Relu, 0).validate().is_err());
        assert!(spec(0, &[2], 1, Activation::Relu, 0).validate().is_err());
        let mut sp = spec(2, &[2], 1, Activation::Relu, 1);
        sp.embed_dim = 3;
        assert!(sp.validate().is_err());
    }
}
