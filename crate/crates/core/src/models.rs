//! Structure-preserving parameterizations and their composition into the
//! right-hand side `du/dt = A_L u + g(u)`.
//!
//! * [`HurwitzLinear`] builds `A_L = (G_s + G_u) S + μI` from Cholesky-style
//!   factors, so every eigenvalue of `A_L` has real part at most `μ` for any
//!   finite parameter values.
//! * [`LipschitzMlp`] rescales each weight matrix by
//!   `L^{1/p} / max(1, sqrt(‖W‖_1 ‖W‖_∞))`, which makes the whole network
//!   provably `L`-Lipschitz in the 2-norm.
//! * [`BilinearForm`] is a pure quadratic-plus-constant map: zero Jacobian at
//!   the origin, so the linear dynamics live entirely in `A_L`.
//! * [`Autoencoder`] optionally moves the dynamics into learned latent
//!   coordinates.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Value;
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Floor added to the softplus-mapped factor diagonals.
pub const DIAG_EPS: f64 = 1e-6;

fn tri_positions(n: usize, strict: bool) -> Vec<(usize, usize)> {
    let mut pos = Vec::new();
    for i in 0..n {
        let jmax = if strict { i } else { i + 1 };
        for j in 0..jmax {
            pos.push((i, j));
        }
    }
    pos
}

fn diag_positions(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i, i)).collect()
}

/// Solve `softplus(x) + DIAG_EPS = d` for the raw parameter.
pub fn softplus_inverse(d: f64) -> f64 {
    let y = (d - DIAG_EPS).max(1e-12);
    // x = ln(e^y - 1), stable for both tails
    if y > 30.0 {
        y
    } else {
        (y.exp_m1()).max(1e-300).ln()
    }
}

// ---- Hurwitz-stable linear operator -----------------------------------------

/// The factored linear operator
/// `A_L = (-L_G L_G^T + (L_s - L_s^T)) (L_S L_S^T) + μI`.
///
/// `L_S` and `L_G` are lower triangular with softplus-positive diagonals, so
/// `S` is symmetric positive definite and `G_s = -L_G L_G^T` symmetric
/// negative definite; `L_s - L_s^T` is skew. The factorization spends
/// `(3n² + n)/2` trainable scalars.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HurwitzLinear {
    pub n: usize,
    /// Fixed spectral shift; not trained.
    pub mu: f64,
    pub prefix: String,
}

impl HurwitzLinear {
    pub fn new(n: usize, mu: f64, prefix: &str) -> Self {
        HurwitzLinear { n, mu, prefix: prefix.to_string() }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// Register parameters. Diagonals are stored raw and pass through
    /// softplus at assembly; `init_diag` is the desired post-softplus value
    /// and sets the scale of the off-diagonal draws too.
    pub fn init<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        init_diag: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n = self.n;
        let raw_diag = softplus_inverse(init_diag);
        let k_low = n * (n - 1) / 2;
        let spread = 0.5 * init_diag / (n as f64).sqrt();
        let low = |rng: &mut ChaCha8Rng| {
            Array1::from_shape_fn(k_low, |_| T::from_f64_lossy(rng.gen_range(-spread..=spread)))
        };
        store.insert(
            &self.name("ls_diag"),
            Value::Vector(Array1::from_elem(n, T::from_f64_lossy(raw_diag))),
        )?;
        store.insert(&self.name("ls_low"), Value::Vector(low(rng)))?;
        store.insert(
            &self.name("lg_diag"),
            Value::Vector(Array1::from_elem(n, T::from_f64_lossy(raw_diag))),
        )?;
        store.insert(&self.name("lg_low"), Value::Vector(low(rng)))?;
        store.insert(&self.name("skew"), Value::Vector(low(rng)))?;
        Ok(())
    }

    /// Register parameters from explicit factor matrices (diagonals are the
    /// post-softplus targets).
    pub fn init_from_factors<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        l_s: &Array2<f64>,
        l_g: &Array2<f64>,
        l_skew: &Array2<f64>,
    ) -> Result<()> {
        let n = self.n;
        let pack_low = |m: &Array2<f64>| {
            let pos = tri_positions(n, true);
            Value::Vector(Array1::from_iter(pos.iter().map(|&(i, j)| T::from_f64_lossy(m[(i, j)]))))
        };
        let pack_diag = |m: &Array2<f64>| {
            Value::Vector(Array1::from_iter(
                (0..n).map(|i| T::from_f64_lossy(softplus_inverse(m[(i, i)]))),
            ))
        };
        store.insert(&self.name("ls_diag"), pack_diag(l_s))?;
        store.insert(&self.name("ls_low"), pack_low(l_s))?;
        store.insert(&self.name("lg_diag"), pack_diag(l_g))?;
        store.insert(&self.name("lg_low"), pack_low(l_g))?;
        store.insert(&self.name("skew"), pack_low(l_skew))?;
        Ok(())
    }

    /// Assemble `A_L` on the tape; differentiable in every factor entry.
    pub fn assemble<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let n = self.n;
        let low_pos = tri_positions(n, true);
        let dia_pos = diag_positions(n);

        let build_lower = |tape: &mut Tape<T>,
                           diag_name: &str,
                           low_name: &str,
                           store: &ParamStore<T>|
         -> Result<Var> {
            let raw_d = tape.leaf(store, diag_name)?;
            let sp = tape.softplus(raw_d);
            let eps = tape.constant_vector(Array1::from_elem(n, T::from_f64_lossy(DIAG_EPS)));
            let d = tape.add(sp, eps)?;
            let d_mat = tape.scatter_mat(d, &dia_pos, n, n)?;
            if low_pos.is_empty() {
                return Ok(d_mat);
            }
            let low = tape.leaf(store, low_name)?;
            let low_mat = tape.scatter_mat(low, &low_pos, n, n)?;
            tape.add(d_mat, low_mat)
        };

        let l_s = build_lower(tape, &self.name("ls_diag"), &self.name("ls_low"), store)?;
        let l_g = build_lower(tape, &self.name("lg_diag"), &self.name("lg_low"), store)?;

        let l_s_t = tape.transpose(l_s)?;
        let s = tape.matmul(l_s, l_s_t)?;

        let l_g_t = tape.transpose(l_g)?;
        let gg = tape.matmul(l_g, l_g_t)?;
        let g_s = tape.scale(gg, -T::one());

        let g_total = if n > 1 {
            let sk = tape.leaf(store, &self.name("skew"))?;
            let sk_mat = tape.scatter_mat(sk, &low_pos, n, n)?;
            let sk_t = tape.transpose(sk_mat)?;
            let g_u = tape.sub(sk_mat, sk_t)?;
            tape.add(g_s, g_u)?
        } else {
            g_s
        };

        let a_h = tape.matmul(g_total, s)?;
        let shift = tape.constant_matrix(Array2::eye(n).mapv(|e: T| e * T::from_f64_lossy(self.mu)));
        tape.add(a_h, shift)
    }

    /// Assembled operator as a plain matrix (fresh throwaway tape).
    pub fn assemble_plain<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let a = self.assemble(&mut tape, store)?;
        Ok(tape.value(a).as_matrix()?.clone())
    }

    pub fn param_names(&self) -> Vec<String> {
        ["ls_diag", "ls_low", "lg_diag", "lg_low", "skew"].iter().map(|p| self.name(p)).collect()
    }
}

// ---- multilayer perceptron ---------------------------------------------------

/// Plain feed-forward stack: tanh on hidden layers, affine output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub prefix: String,
    /// Per-layer Lipschitz normalization target `L^{1/p}`; `None` leaves the
    /// weights unconstrained.
    pub layer_lipschitz: Option<f64>,
}

struct BoundLayer {
    w: Var,
    b: Var,
}

pub struct BoundMlp<'m> {
    #[allow(dead_code)]
    mlp: &'m Mlp,
    layers: Vec<BoundLayer>,
}

impl Mlp {
    pub fn new(dims: Vec<usize>, prefix: &str, layer_lipschitz: Option<f64>) -> Self {
        Mlp { dims, prefix: prefix.to_string(), layer_lipschitz }
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn w_name(&self, i: usize) -> String {
        format!("{}.w{i}", self.prefix)
    }

    fn b_name(&self, i: usize) -> String {
        format!("{}.b{i}", self.prefix)
    }

    /// Register weights `U(-scale, scale)/sqrt(fan_in)` and zero biases.
    pub fn init<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        for i in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.dims[i], self.dims[i + 1]);
            let a = scale / (fan_in as f64).sqrt();
            let w =
                Array2::from_shape_fn((fan_out, fan_in), |_| T::from_f64_lossy(rng.gen_range(-a..=a)));
            store.insert(&self.w_name(i), Value::Matrix(w))?;
            store.insert(&self.b_name(i), Value::Vector(Array1::zeros(fan_out)))?;
        }
        Ok(())
    }

    /// Register an exact identity map (square affine layers).
    pub fn init_identity<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for i in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.dims[i], self.dims[i + 1]);
            if fan_in != fan_out {
                return Err(Error::invalid(format!(
                    "identity init needs square layers, got {fan_in}->{fan_out}"
                )));
            }
            store.insert(&self.w_name(i), Value::Matrix(Array2::eye(fan_out)))?;
            store.insert(&self.b_name(i), Value::Vector(Array1::zeros(fan_out)))?;
        }
        Ok(())
    }

    /// Bind parameters onto a tape. With Lipschitz control each weight is
    /// normalized here, from its live value, so the normalization
    /// participates in the backward sweep.
    pub fn bind<'m, T: Scalar>(&'m self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<BoundMlp<'m>> {
        let mut layers = Vec::with_capacity(self.n_layers());
        for i in 0..self.n_layers() {
            let w_raw = tape.leaf(store, &self.w_name(i))?;
            let b = tape.leaf(store, &self.b_name(i))?;
            let w = match self.layer_lipschitz {
                Some(lp) => {
                    let n1 = tape.norm1(w_raw)?;
                    let ninf = tape.norminf(w_raw)?;
                    let prod = tape.mul(n1, ninf)?;
                    let root = tape.sqrt(prod);
                    let denom = tape.max1(root);
                    let inv = tape.recip(denom);
                    let factor = tape.scale(inv, T::from_f64_lossy(lp));
                    tape.scale_by(w_raw, factor)?
                }
                None => w_raw,
            };
            layers.push(BoundLayer { w, b });
        }
        Ok(BoundMlp { mlp: self, layers })
    }
}

impl<'m> BoundMlp<'m> {
    /// Forward pass for a single state (vector) or batch of columns (matrix).
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut z = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let lin = match tape.value(z) {
                Value::Vector(_) => {
                    let y = tape.matvec(layer.w, z)?;
                    tape.add(y, layer.b)?
                }
                Value::Matrix(_) => {
                    let y = tape.matmul(layer.w, z)?;
                    tape.add_col(y, layer.b)?
                }
                Value::Scalar(_) => return Err(Error::shape("mlp", "scalar input".to_string())),
            };
            z = if i < last { tape.tanh(lin) } else { lin };
        }
        Ok(z)
    }
}

// ---- Lipschitz-controlled network ---------------------------------------------

/// Feed-forward map with a provable global Lipschitz bound `L`: every layer
/// is rescaled by `L^{1/p} / max(1, sqrt(‖W‖_∞ ‖W‖_1))`, and
/// `‖W‖_2 ≤ sqrt(‖W‖_1 ‖W‖_∞)` does the rest. Hidden layers use tanh
/// (1-Lipschitz); the final layer is affine and normalized identically,
/// counting as one of the `p` factors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LipschitzMlp {
    pub mlp: Mlp,
    pub lipschitz: f64,
}

impl LipschitzMlp {
    pub fn new(n: usize, width: usize, layers: usize, lipschitz: f64, prefix: &str) -> Self {
        let dims = mlp_dims(n, width, layers, n);
        let per_layer = lipschitz.powf(1.0 / layers as f64);
        LipschitzMlp { mlp: Mlp::new(dims, prefix, Some(per_layer)), lipschitz }
    }
}

/// Unconstrained variant with the same shape, for ablations.
pub fn unconstrained_mlp(n: usize, width: usize, layers: usize, prefix: &str) -> Mlp {
    Mlp::new(mlp_dims(n, width, layers, n), prefix, None)
}

fn mlp_dims(input: usize, width: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    for _ in 0..layers.saturating_sub(1) {
        dims.push(width);
    }
    dims.push(output);
    dims
}

// ---- bilinear form --------------------------------------------------------------

/// Low-rank bilinear map `g(u) = Σ_r (C^(r) u) ⊙ (D^(r) u) + b`. Quadratic by
/// construction: `g(0) = b` and the Jacobian at the origin vanishes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BilinearForm {
    pub n: usize,
    pub rank: usize,
    pub prefix: String,
}

pub struct BoundBilinear<'m> {
    form: &'m BilinearForm,
    c: Vec<Var>,
    d: Vec<Var>,
    b: Var,
}

impl BilinearForm {
    pub fn new(n: usize, rank: usize, prefix: &str) -> Self {
        BilinearForm { n, rank, prefix: prefix.to_string() }
    }

    fn c_name(&self, r: usize) -> String {
        format!("{}.c{r}", self.prefix)
    }

    fn d_name(&self, r: usize) -> String {
        format!("{}.d{r}", self.prefix)
    }

    fn b_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let a = scale / (self.n as f64).sqrt();
        for r in 0..self.rank {
            let c =
                Array2::from_shape_fn((self.n, self.n), |_| T::from_f64_lossy(rng.gen_range(-a..=a)));
            let d =
                Array2::from_shape_fn((self.n, self.n), |_| T::from_f64_lossy(rng.gen_range(-a..=a)));
            store.insert(&self.c_name(r), Value::Matrix(c))?;
            store.insert(&self.d_name(r), Value::Matrix(d))?;
        }
        store.insert(&self.b_name(), Value::Vector(Array1::zeros(self.n)))?;
        Ok(())
    }

    pub fn bind<'m, T: Scalar>(
        &'m self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
    ) -> Result<BoundBilinear<'m>> {
        let mut c = Vec::with_capacity(self.rank);
        let mut d = Vec::with_capacity(self.rank);
        for r in 0..self.rank {
            c.push(tape.leaf(store, &self.c_name(r))?);
            d.push(tape.leaf(store, &self.d_name(r))?);
        }
        let b = tape.leaf(store, &self.b_name())?;
        Ok(BoundBilinear { form: self, c, d, b })
    }
}

impl<'m> BoundBilinear<'m> {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, u: Var) -> Result<Var> {
        let mut terms = Vec::with_capacity(self.form.rank);
        let vector_input = matches!(tape.value(u), Value::Vector(_));
        for r in 0..self.form.rank {
            let (cu, du) = if vector_input {
                (tape.matvec(self.c[r], u)?, tape.matvec(self.d[r], u)?)
            } else {
                (tape.matmul(self.c[r], u)?, tape.matmul(self.d[r], u)?)
            };
            terms.push(tape.mul(cu, du)?);
        }
        let quad = if terms.is_empty() {
            let zero = tape.value(u).zeros_like();
            tape.constant(zero)
        } else {
            tape.add_n(&terms)?
        };
        if vector_input {
            tape.add(quad, self.b)
        } else {
            tape.add_col(quad, self.b)
        }
    }
}

// ---- autoencoder ------------------------------------------------------------------

/// Encoder/decoder pair moving between physical coordinates (dim `m`) and
/// latent coordinates (dim `n <= m`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub physical_dim: usize,
    pub latent_dim: usize,
}

impl Autoencoder {
    /// Hidden width 0 builds single affine layers (a linear autoencoder).
    pub fn new(m: usize, n: usize, hidden: usize, layers: usize) -> Self {
        let (enc_dims, dec_dims) = if hidden == 0 {
            (vec![m, n], vec![n, m])
        } else {
            let mut e = vec![m];
            let mut d = vec![n];
            for _ in 0..layers.saturating_sub(1) {
                e.push(hidden);
                d.push(hidden);
            }
            e.push(n);
            d.push(m);
            (e, d)
        };
        Autoencoder {
            encoder: Mlp::new(enc_dims, "enc", None),
            decoder: Mlp::new(dec_dims, "dec", None),
            physical_dim: m,
            latent_dim: n,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.encoder.init(store, 1.0, rng)?;
        self.decoder.init(store, 1.0, rng)
    }

    pub fn init_identity<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.encoder.init_identity(store)?;
        self.decoder.init_identity(store)
    }
}

// ---- the composed model --------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Nonlinearity {
    Lipschitz(LipschitzMlp),
    Unconstrained(Mlp),
    Bilinear(BilinearForm),
}

impl Nonlinearity {
    pub fn configured_lipschitz(&self) -> Option<f64> {
        match self {
            Nonlinearity::Lipschitz(l) => Some(l.lipschitz),
            _ => None,
        }
    }
}

/// The composed right-hand side `rhs(u) = A_L u + g(u)` with an optional
/// coordinate transform around it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NodeModel {
    pub linear: HurwitzLinear,
    pub nonlinear: Nonlinearity,
    pub autoencoder: Option<Autoencoder>,
}

pub enum BoundNonlinearity<'m> {
    Mlp(BoundMlp<'m>),
    Bilinear(BoundBilinear<'m>),
}

impl<'m> BoundNonlinearity<'m> {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, u: Var) -> Result<Var> {
        match self {
            BoundNonlinearity::Mlp(m) => m.apply(tape, u),
            BoundNonlinearity::Bilinear(b) => b.apply(tape, u),
        }
    }
}

/// All model nodes bound onto one tape: assemble once, step many times.
pub struct BoundModel<'m> {
    pub a_l: Var,
    pub nonlinear: BoundNonlinearity<'m>,
    pub encoder: Option<BoundMlp<'m>>,
    pub decoder: Option<BoundMlp<'m>>,
}

impl NodeModel {
    pub fn latent_dim(&self) -> usize {
        self.linear.n
    }

    pub fn physical_dim(&self) -> usize {
        self.autoencoder.as_ref().map(|ae| ae.physical_dim).unwrap_or(self.linear.n)
    }

    pub fn bind<'m, T: Scalar>(&'m self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<BoundModel<'m>> {
        let a_l = self.linear.assemble(tape, store)?;
        let nonlinear = match &self.nonlinear {
            Nonlinearity::Lipschitz(l) => BoundNonlinearity::Mlp(l.mlp.bind(tape, store)?),
            Nonlinearity::Unconstrained(m) => BoundNonlinearity::Mlp(m.bind(tape, store)?),
            Nonlinearity::Bilinear(b) => BoundNonlinearity::Bilinear(b.bind(tape, store)?),
        };
        let (encoder, decoder) = match &self.autoencoder {
            Some(ae) => (Some(ae.encoder.bind(tape, store)?), Some(ae.decoder.bind(tape, store)?)),
            None => (None, None),
        };
        Ok(BoundModel { a_l, nonlinear, encoder, decoder })
    }

    /// `A_L u + g(u)` for a latent state.
    pub fn rhs_eval<T: Scalar>(&self, tape: &mut Tape<T>, bound: &BoundModel<'_>, u: Var) -> Result<Var> {
        let lin = match tape.value(u) {
            Value::Vector(_) => tape.matvec(bound.a_l, u)?,
            Value::Matrix(_) => tape.matmul(bound.a_l, u)?,
            Value::Scalar(_) => return Err(Error::shape("rhs_eval", "scalar state".to_string())),
        };
        let g = bound.nonlinear.apply(tape, u)?;
        tape.add(lin, g)
    }

    /// Plain-array nonlinear map (fresh tape per call), for sampling-based
    /// diagnostics.
    pub fn nonlinear_fn<'a, T: Scalar>(
        &'a self,
        store: &'a ParamStore<T>,
    ) -> impl Fn(&Array1<T>) -> Result<Array1<T>> + 'a {
        move |u: &Array1<T>| {
            let mut tape = Tape::new();
            let bound = match &self.nonlinear {
                Nonlinearity::Lipschitz(l) => BoundNonlinearity::Mlp(l.mlp.bind(&mut tape, store)?),
                Nonlinearity::Unconstrained(m) => BoundNonlinearity::Mlp(m.bind(&mut tape, store)?),
                Nonlinearity::Bilinear(b) => BoundNonlinearity::Bilinear(b.bind(&mut tape, store)?),
            };
            let uv = tape.constant_vector(u.clone());
            let out = bound.apply(&mut tape, uv)?;
            Ok(tape.value(out).as_vector()?.clone())
        }
    }

    /// Encode a physical state (identity when no autoencoder is configured).
    pub fn encode_plain<T: Scalar>(&self, store: &ParamStore<T>, u: &Array1<T>) -> Result<Array1<T>> {
        match &self.autoencoder {
            None => Ok(u.clone()),
            Some(ae) => {
                let mut tape = Tape::new();
                let b = ae.encoder.bind(&mut tape, store)?;
                let uv = tape.constant_vector(u.clone());
                let out = b.apply(&mut tape, uv)?;
                Ok(tape.value(out).as_vector()?.clone())
            }
        }
    }

    pub fn decode_plain<T: Scalar>(&self, store: &ParamStore<T>, u: &Array1<T>) -> Result<Array1<T>> {
        match &self.autoencoder {
            None => Ok(u.clone()),
            Some(ae) => {
                let mut tape = Tape::new();
                let b = ae.decoder.bind(&mut tape, store)?;
                let uv = tape.constant_vector(u.clone());
                let out = b.apply(&mut tape, uv)?;
                Ok(tape.value(out).as_vector()?.clone())
            }
        }
    }

    /// Assembled `A_L` as a plain matrix.
    pub fn linear_plain<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Array2<T>> {
        self.linear.assemble_plain(store)
    }
}

// ---- model construction from a config ----------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NonlinSpec {
    Lipschitz { lipschitz: f64, width: usize, layers: usize },
    Unconstrained { width: usize, layers: usize },
    Bilinear { rank: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AeSpec {
    pub hidden: usize,
    pub layers: usize,
}

/// Everything needed to build (and rebuild) a model deterministically.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Physical dimension m.
    pub state_dim: usize,
    /// Latent dimension n (equals `state_dim` without an autoencoder).
    pub latent_dim: usize,
    /// Spectral shift for the linear operator.
    pub mu: f64,
    pub nonlin: NonlinSpec,
    pub autoencoder: Option<AeSpec>,
    /// Initialization scale for the nonlinear operator's weights.
    pub init_scale: f64,
    /// Post-softplus target for the Hurwitz factor diagonals at init.
    pub hurwitz_init_diag: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn build<T: Scalar>(&self) -> Result<(NodeModel, ParamStore<T>)> {
        if self.autoencoder.is_none() && self.state_dim != self.latent_dim {
            return Err(Error::invalid(format!(
                "latent dim {} != state dim {} requires an autoencoder",
                self.latent_dim, self.state_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut store = ParamStore::new();
        let n = self.latent_dim;

        let linear = HurwitzLinear::new(n, self.mu, "hurwitz");
        linear.init(&mut store, self.hurwitz_init_diag, &mut rng)?;

        let nonlinear = match &self.nonlin {
            NonlinSpec::Lipschitz { lipschitz, width, layers } => {
                let lip = LipschitzMlp::new(n, *width, *layers, *lipschitz, "g");
                lip.mlp.init(&mut store, self.init_scale, &mut rng)?;
                Nonlinearity::Lipschitz(lip)
            }
            NonlinSpec::Unconstrained { width, layers } => {
                let mlp = unconstrained_mlp(n, *width, *layers, "g");
                mlp.init(&mut store, self.init_scale, &mut rng)?;
                Nonlinearity::Unconstrained(mlp)
            }
            NonlinSpec::Bilinear { rank } => {
                let bl = BilinearForm::new(n, *rank, "g");
                bl.init(&mut store, self.init_scale, &mut rng)?;
                Nonlinearity::Bilinear(bl)
            }
        };

        let autoencoder = match &self.autoencoder {
            Some(spec) => {
                let ae = Autoencoder::new(self.state_dim, n, spec.hidden, spec.layers);
                if spec.hidden == 0 && self.state_dim == n {
                    ae.init_identity(&mut store)?;
                } else {
                    ae.init(&mut store, &mut rng)?;
                }
                Some(ae)
            }
            None => None,
        };

        Ok((NodeModel { linear, nonlinear, autoencoder }, store))
    }
}

// ---- sampling diagnostics --------------------------------------------------------------

/// Empirical Lipschitz estimate: max over sampled pairs of
/// `‖f(u1) - f(u2)‖ / ‖u1 - u2‖`, with inputs drawn uniformly from the cube
/// of the given radius. Degenerate pairs are skipped.
pub fn empirical_lipschitz<T: Scalar>(
    f: impl Fn(&Array1<T>) -> Result<Array1<T>>,
    dim: usize,
    samples: usize,
    radius: T,
    seed: u64,
) -> Result<T> {
    if samples < 1 {
        return Err(Error::invalid("empirical_lipschitz requires samples >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = radius.to_f64_lossy();
    let mut best = T::zero();
    for _ in 0..samples {
        let u1 = Array1::from_shape_fn(dim, |_| T::from_f64_lossy(rng.gen_range(-r..=r)));
        let u2 = Array1::from_shape_fn(dim, |_| T::from_f64_lossy(rng.gen_range(-r..=r)));
        let du = (&u1 - &u2).mapv(|x| x * x).sum().sqrt();
        if du == T::zero() {
            continue;
        }
        let df = (f(&u1)? - f(&u2)?).mapv(|x| x * x).sum().sqrt();
        let ratio = df / du;
        if ratio > best {
            best = ratio;
        }
    }
    Ok(best)
}
