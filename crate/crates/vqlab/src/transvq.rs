//! Learnable codebook projector: a single-head linear-attention block plus
//! a small MLP, applied to the codebook with each code as a token.
//!
//! The transformed codebook is `C' = C + f(C)`, where `f` embeds the codes
//! into the model width, runs attention and the MLP (each with its own
//! residual), and projects back down. Training updates only the projector
//! parameters; the base codebook is frozen. Because every transformed code
//! shares the parameters, a gradient step driven by one winner row moves
//! all rows of `C'`.
//!
//! Attention is linear: scores are `Q K^T / sqrt(d_model)` with no softmax.
//! The MLP nonlinearity is `tanh`, whose exact derivative keeps the
//! hand-rolled backward pass and the finite-difference oracle in agreement.
//!
//! All gradients are exact reverse-mode, computed from a [`ProjectorTape`]
//! recorded during the forward pass. A tape is tied to the parameter
//! version that produced it; using it after the parameters change is an
//! error.

use std::io::{self, BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::core::Codebook;
use crate::error::{Error, Result};

/// Projector dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectorConfig {
    /// Code dimension `d`.
    pub dim: usize,
    /// Token width inside the block.
    pub d_model: usize,
    /// MLP hidden width as a multiple of `d_model`.
    pub mlp_ratio: usize,
}

impl ProjectorConfig {
    /// Desk-scale default: model width 16, MLP ratio 2.
    pub fn desk(dim: usize) -> Self {
        Self { dim, d_model: 16, mlp_ratio: 2 }
    }

    /// Full-scale preset: model width 256, MLP ratio 2.
    pub fn full_scale(dim: usize) -> Self {
        Self { dim, d_model: 256, mlp_ratio: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.d_model == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig(
                "projector dimensions must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }
}

/// Identifies one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorId {
    WQuery,
    BQuery,
    WKey,
    BKey,
    WValue,
    BValue,
    WAttnOut,
    BAttnOut,
    WMlpIn,
    BMlpIn,
    WMlpOut,
    BMlpOut,
    WEmbedIn,
    BEmbedIn,
    WEmbedOut,
    BEmbedOut,
}

/// Every tensor, in serialization order.
pub const ALL_TENSORS: [TensorId; 16] = [
    TensorId::WEmbedIn,
    TensorId::BEmbedIn,
    TensorId::WQuery,
    TensorId::BQuery,
    TensorId::WKey,
    TensorId::BKey,
    TensorId::WValue,
    TensorId::BValue,
    TensorId::WAttnOut,
    TensorId::BAttnOut,
    TensorId::WMlpIn,
    TensorId::BMlpIn,
    TensorId::WMlpOut,
    TensorId::BMlpOut,
    TensorId::WEmbedOut,
    TensorId::BEmbedOut,
];

impl TensorId {
    pub fn name(&self) -> &'static str {
        match self {
            TensorId::WQuery => "w_q",
            TensorId::BQuery => "b_q",
            TensorId::WKey => "w_k",
            TensorId::BKey => "b_k",
            TensorId::WValue => "w_v",
            TensorId::BValue => "b_v",
            TensorId::WAttnOut => "w_o",
            TensorId::BAttnOut => "b_o",
            TensorId::WMlpIn => "w_in",
            TensorId::BMlpIn => "b_in",
            TensorId::WMlpOut => "w_out",
            TensorId::BMlpOut => "b_out",
            TensorId::WEmbedIn => "w_embed_in",
            TensorId::BEmbedIn => "b_embed_in",
            TensorId::WEmbedOut => "w_embed_out",
            TensorId::BEmbedOut => "b_embed_out",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        ALL_TENSORS.iter().copied().find(|t| t.name() == name)
    }
}

/// One set of tensors with the projector's shapes; used for both parameters
/// and gradients.
#[derive(Debug, Clone)]
pub struct TensorSet {
    cfg: ProjectorConfig,
    w_q: Array2<f64>,
    b_q: Array1<f64>,
    w_k: Array2<f64>,
    b_k: Array1<f64>,
    w_v: Array2<f64>,
    b_v: Array1<f64>,
    w_o: Array2<f64>,
    b_o: Array1<f64>,
    w_in: Array2<f64>,
    b_in: Array1<f64>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
    w_ei: Array2<f64>,
    b_ei: Array1<f64>,
    w_eo: Array2<f64>,
    b_eo: Array1<f64>,
}

impl TensorSet {
    fn zeros(cfg: ProjectorConfig) -> Self {
        let (d, dm, h) = (cfg.dim, cfg.d_model, cfg.hidden());
        Self {
            cfg,
            w_q: Array2::zeros((dm, dm)),
            b_q: Array1::zeros(dm),
            w_k: Array2::zeros((dm, dm)),
            b_k: Array1::zeros(dm),
            w_v: Array2::zeros((dm, dm)),
            b_v: Array1::zeros(dm),
            w_o: Array2::zeros((dm, dm)),
            b_o: Array1::zeros(dm),
            w_in: Array2::zeros((dm, h)),
            b_in: Array1::zeros(h),
            w_out: Array2::zeros((h, dm)),
            b_out: Array1::zeros(dm),
            w_ei: Array2::zeros((d, dm)),
            b_ei: Array1::zeros(dm),
            w_eo: Array2::zeros((dm, d)),
            b_eo: Array1::zeros(d),
        }
    }

    /// Flat view of one tensor (row-major).
    pub fn tensor(&self, id: TensorId) -> &[f64] {
        match id {
            TensorId::WQuery => self.w_q.as_slice().unwrap(),
            TensorId::BQuery => self.b_q.as_slice().unwrap(),
            TensorId::WKey => self.w_k.as_slice().unwrap(),
            TensorId::BKey => self.b_k.as_slice().unwrap(),
            TensorId::WValue => self.w_v.as_slice().unwrap(),
            TensorId::BValue => self.b_v.as_slice().unwrap(),
            TensorId::WAttnOut => self.w_o.as_slice().unwrap(),
            TensorId::BAttnOut => self.b_o.as_slice().unwrap(),
            TensorId::WMlpIn => self.w_in.as_slice().unwrap(),
            TensorId::BMlpIn => self.b_in.as_slice().unwrap(),
            TensorId::WMlpOut => self.w_out.as_slice().unwrap(),
            TensorId::BMlpOut => self.b_out.as_slice().unwrap(),
            TensorId::WEmbedIn => self.w_ei.as_slice().unwrap(),
            TensorId::BEmbedIn => self.b_ei.as_slice().unwrap(),
            TensorId::WEmbedOut => self.w_eo.as_slice().unwrap(),
            TensorId::BEmbedOut => self.b_eo.as_slice().unwrap(),
        }
    }

    fn tensor_mut(&mut self, id: TensorId) -> &mut [f64] {
        match id {
            TensorId::WQuery => self.w_q.as_slice_mut().unwrap(),
            TensorId::BQuery => self.b_q.as_slice_mut().unwrap(),
            TensorId::WKey => self.w_k.as_slice_mut().unwrap(),
            TensorId::BKey => self.b_k.as_slice_mut().unwrap(),
            TensorId::WValue => self.w_v.as_slice_mut().unwrap(),
            TensorId::BValue => self.b_v.as_slice_mut().unwrap(),
            TensorId::WAttnOut => self.w_o.as_slice_mut().unwrap(),
            TensorId::BAttnOut => self.b_o.as_slice_mut().unwrap(),
            TensorId::WMlpIn => self.w_in.as_slice_mut().unwrap(),
            TensorId::BMlpIn => self.b_in.as_slice_mut().unwrap(),
            TensorId::WMlpOut => self.w_out.as_slice_mut().unwrap(),
            TensorId::BMlpOut => self.b_out.as_slice_mut().unwrap(),
            TensorId::WEmbedIn => self.w_ei.as_slice_mut().unwrap(),
            TensorId::BEmbedIn => self.b_ei.as_slice_mut().unwrap(),
            TensorId::WEmbedOut => self.w_eo.as_slice_mut().unwrap(),
            TensorId::BEmbedOut => self.b_eo.as_slice_mut().unwrap(),
        }
    }

    /// Shape of one tensor as (rows, cols); biases report one row.
    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let (d, dm, h) = (self.cfg.dim, self.cfg.d_model, self.cfg.hidden());
        match id {
            TensorId::WQuery | TensorId::WKey | TensorId::WValue | TensorId::WAttnOut => (dm, dm),
            TensorId::BQuery
            | TensorId::BKey
            | TensorId::BValue
            | TensorId::BAttnOut
            | TensorId::BEmbedIn
            | TensorId::BMlpOut => (1, dm),
            TensorId::WMlpIn => (dm, h),
            TensorId::BMlpIn => (1, h),
            TensorId::WMlpOut => (h, dm),
            TensorId::WEmbedIn => (d, dm),
            TensorId::WEmbedOut => (dm, d),
            TensorId::BEmbedOut => (1, d),
        }
    }

    fn bitwise_eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg
            && ALL_TENSORS.iter().all(|&id| {
                self.tensor(id)
                    .iter()
                    .zip(other.tensor(id).iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            })
    }
}

/// Gradient buffers, one per parameter tensor.
pub type ProjectorGrads = TensorSet;

/// Projector parameters plus a mutation counter that ties tapes to the
/// parameter state they were recorded under.
#[derive(Debug, Clone)]
pub struct ProjectorParams {
    tensors: TensorSet,
    version: u64,
}

impl ProjectorParams {
    /// Identity initialization: mixing weights are random, every output-side
    /// projection (attention out, MLP out, embed out) and every bias is
    /// zero, so the projected codebook equals the base codebook exactly.
    pub fn identity_init(cfg: ProjectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = TensorSet::zeros(cfg);
        for id in [
            TensorId::WEmbedIn,
            TensorId::WQuery,
            TensorId::WKey,
            TensorId::WValue,
            TensorId::WMlpIn,
        ] {
            let (rows, _) = t.shape(id);
            let scale = 1.0 / (rows as f64).sqrt();
            for v in t.tensor_mut(id) {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(Self { tensors: t, version: 0 })
    }

    /// Generic initialization: every tensor nonzero random, so parameter
    /// sharing couples all rows from the first step. Scales keep the MLP
    /// pre-activations inside the responsive range of tanh.
    pub fn random_init(cfg: ProjectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = TensorSet::zeros(cfg);
        for id in ALL_TENSORS {
            let (rows, _) = t.shape(id);
            let scale = if rows == 1 { 0.05 } else { 0.5 / (rows as f64).sqrt() };
            for v in t.tensor_mut(id) {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(Self { tensors: t, version: 0 })
    }

    pub fn config(&self) -> ProjectorConfig {
        self.tensors.cfg
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn tensor(&self, id: TensorId) -> &[f64] {
        self.tensors.tensor(id)
    }

    /// Mutable access to one tensor; invalidates existing tapes.
    pub fn tensor_mut(&mut self, id: TensorId) -> &mut [f64] {
        self.version += 1;
        self.tensors.tensor_mut(id)
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.tensors.shape(id)
    }

    /// Bitwise equality of every tensor (mutation counters are ignored).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors.bitwise_eq(&other.tensors)
    }

    /// One plain gradient-descent step over every tensor.
    pub fn apply_gradients(&mut self, grads: &ProjectorGrads, lr: f64) -> Result<()> {
        if grads.cfg != self.tensors.cfg {
            return Err(Error::ShapeMismatch("gradient shapes do not match".into()));
        }
        for id in ALL_TENSORS {
            let g: Vec<f64> = grads.tensor(id).to_vec();
            for (p, gv) in self.tensors.tensor_mut(id).iter_mut().zip(g) {
                *p -= lr * gv;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Writes the versioned text serialization (lossless: values are stored
    /// as f64 bit patterns).
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let cfg = self.tensors.cfg;
        writeln!(w, "transvq-params v1")?;
        writeln!(w, "dim {}", cfg.dim)?;
        writeln!(w, "d_model {}", cfg.d_model)?;
        writeln!(w, "mlp_ratio {}", cfg.mlp_ratio)?;
        for id in ALL_TENSORS {
            let (rows, cols) = self.tensors.shape(id);
            writeln!(w, "tensor {} {} {}", id.name(), rows, cols)?;
            let flat = self.tensors.tensor(id);
            for row in 0..rows {
                let cells: Vec<String> = (0..cols)
                    .map(|c| format!("{:016x}", flat[row * cols + c].to_bits()))
                    .collect();
                writeln!(w, "{}", cells.join(" "))?;
            }
        }
        Ok(())
    }

    /// Parses the text serialization produced by [`write_to`](Self::write_to).
    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next_line = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Format(format!("unexpected end of input, wanted {what}")))?
                .map_err(|e| Error::Format(format!("read failure: {e}")))
        };
        let header = next_line("header")?;
        if header.trim() != "transvq-params v1" {
            return Err(Error::Format(format!("unsupported header '{header}'")));
        }
        let mut read_field = |name: &str| -> Result<usize> {
            let line = next_line(name)?;
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some(key), Some(value)) if key == name => value
                    .parse()
                    .map_err(|_| Error::Format(format!("bad {name} value '{value}'"))),
                _ => Err(Error::Format(format!("expected '{name} <n>', got '{line}'"))),
            }
        };
        let dim = read_field("dim")?;
        let d_model = read_field("d_model")?;
        let mlp_ratio = read_field("mlp_ratio")?;
        let cfg = ProjectorConfig { dim, d_model, mlp_ratio };
        cfg.validate()?;
        let mut tensors = TensorSet::zeros(cfg);
        for id in ALL_TENSORS {
            let header = next_line("tensor header")?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "tensor" {
                return Err(Error::Format(format!("expected tensor header, got '{header}'")));
            }
            let tid = TensorId::from_name(parts[1])
                .ok_or_else(|| Error::Format(format!("unknown tensor '{}'", parts[1])))?;
            if tid != id {
                return Err(Error::Format(format!(
                    "tensor '{}' out of order, expected '{}'",
                    parts[1],
                    id.name()
                )));
            }
            let rows: usize = parts[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad row count '{}'", parts[2])))?;
            let cols: usize = parts[3]
                .parse()
                .map_err(|_| Error::Format(format!("bad column count '{}'", parts[3])))?;
            if (rows, cols) != tensors.shape(id) {
                return Err(Error::Format(format!(
                    "tensor '{}' has shape {rows}x{cols}, expected {:?}",
                    id.name(),
                    tensors.shape(id)
                )));
            }
            let flat = tensors.tensor_mut(id);
            for row in 0..rows {
                let line = next_line("tensor row")?;
                let cells: Vec<&str> = line.split_whitespace().collect();
                if cells.len() != cols {
                    return Err(Error::Format(format!(
                        "tensor '{}' row {row} has {} cells, expected {cols}",
                        id.name(),
                        cells.len()
                    )));
                }
                for (c, cell) in cells.iter().enumerate() {
                    let bits = u64::from_str_radix(cell, 16)
                        .map_err(|_| Error::Format(format!("bad f64 bits '{cell}'")))?;
                    flat[row * cols + c] = f64::from_bits(bits);
                }
            }
        }
        Ok(Self { tensors, version: 0 })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> io::Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Format(format!("cannot open params file: {e}")))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}

/// Cached activations of one forward pass, sufficient for exact
/// reverse-mode and tied to the parameter version that produced them.
#[derive(Debug, Clone)]
pub struct ProjectorTape {
    version: u64,
    c: Array2<f64>,
    h0: Array2<f64>,
    q: Array2<f64>,
    km: Array2<f64>,
    v: Array2<f64>,
    scores: Array2<f64>,
    av: Array2<f64>,
    h1: Array2<f64>,
    z: Array2<f64>,
    h2: Array2<f64>,
    c_prime: Array2<f64>,
}

impl ProjectorTape {
    /// The base codebook rows the pass ran on.
    pub fn input(&self) -> ArrayView2<'_, f64> {
        self.c.view()
    }

    /// The transformed codebook the pass produced.
    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.c_prime.view()
    }
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = x.dot(w);
    out += b;
    out
}

/// Projects the base codebook through the block: `C' = C + f(C)`.
///
/// Returns the transformed codebook and a tape for [`backward`].
pub fn project(params: &ProjectorParams, base: &Codebook) -> Result<(Codebook, ProjectorTape)> {
    let cfg = params.config();
    if base.dim() != cfg.dim {
        return Err(Error::ShapeMismatch(format!(
            "codebook of dimension {} for projector dimension {}",
            base.dim(),
            cfg.dim
        )));
    }
    let t = &params.tensors;
    let c = base.codes().clone();
    let h0 = affine(&c, &t.w_ei, &t.b_ei);
    let q = affine(&h0, &t.w_q, &t.b_q);
    let km = affine(&h0, &t.w_k, &t.b_k);
    let v = affine(&h0, &t.w_v, &t.b_v);
    let scores = q.dot(&km.t()) / (cfg.d_model as f64).sqrt();
    let av = scores.dot(&v);
    let h1 = &h0 + &affine(&av, &t.w_o, &t.b_o);
    let z = affine(&h1, &t.w_in, &t.b_in).mapv(f64::tanh);
    let h2 = &h1 + &affine(&z, &t.w_out, &t.b_out);
    let c_prime = &c + &affine(&h2, &t.w_eo, &t.b_eo);
    let codebook = Codebook::new(c_prime.clone())?;
    let tape = ProjectorTape {
        version: params.version,
        c,
        h0,
        q,
        km,
        v,
        scores,
        av,
        h1,
        z,
        h2,
        c_prime,
    };
    Ok((codebook, tape))
}

/// Winner-row embedding loss: squared distance between the transformed
/// winner and the encoder output, plus its gradient with respect to the
/// transformed winner.
pub fn embedding_loss(
    c_prime_winner: ArrayView1<'_, f64>,
    e_x: ArrayView1<'_, f64>,
) -> Result<(f64, Array1<f64>)> {
    if c_prime_winner.len() != e_x.len() {
        return Err(Error::ShapeMismatch(format!(
            "winner of dimension {} against encoder output of dimension {}",
            c_prime_winner.len(),
            e_x.len()
        )));
    }
    let diff = &c_prime_winner - &e_x;
    let loss = diff.dot(&diff);
    Ok((loss, diff * 2.0))
}

/// Exact reverse-mode gradients of every parameter for an upstream gradient
/// on `C'`. The base codebook receives no gradient.
pub fn backward(
    params: &ProjectorParams,
    tape: &ProjectorTape,
    upstream: ArrayView2<'_, f64>,
) -> Result<ProjectorGrads> {
    if tape.version != params.version {
        return Err(Error::StaleTape);
    }
    let cfg = params.config();
    if upstream.dim() != tape.c_prime.dim() {
        return Err(Error::ShapeMismatch(format!(
            "upstream of shape {:?} for output of shape {:?}",
            upstream.dim(),
            tape.c_prime.dim()
        )));
    }
    let t = &params.tensors;
    let mut g = TensorSet::zeros(cfg);
    let upstream = upstream.to_owned();

    // Output projection.
    g.w_eo = tape.h2.t().dot(&upstream);
    g.b_eo = upstream.sum_axis(Axis(0));
    let g_h2 = upstream.dot(&t.w_eo.t());

    // MLP with residual.
    g.w_out = tape.z.t().dot(&g_h2);
    g.b_out = g_h2.sum_axis(Axis(0));
    let g_z = g_h2.dot(&t.w_out.t());
    let g_u = &g_z * &tape.z.mapv(|z| 1.0 - z * z);
    g.w_in = tape.h1.t().dot(&g_u);
    g.b_in = g_u.sum_axis(Axis(0));
    let g_h1 = &g_h2 + &g_u.dot(&t.w_in.t());

    // Attention with residual.
    let g_o = g_h1.clone();
    g.w_o = tape.av.t().dot(&g_o);
    g.b_o = g_o.sum_axis(Axis(0));
    let g_av = g_o.dot(&t.w_o.t());
    let g_scores = g_av.dot(&tape.v.t());
    let g_v = tape.scores.t().dot(&g_av);
    let scale = 1.0 / (cfg.d_model as f64).sqrt();
    let g_q = g_scores.dot(&tape.km) * scale;
    let g_km = g_scores.t().dot(&tape.q) * scale;
    g.w_q = tape.h0.t().dot(&g_q);
    g.b_q = g_q.sum_axis(Axis(0));
    g.w_k = tape.h0.t().dot(&g_km);
    g.b_k = g_km.sum_axis(Axis(0));
    g.w_v = tape.h0.t().dot(&g_v);
    g.b_v = g_v.sum_axis(Axis(0));
    let g_h0 = &g_h1 + &(g_q.dot(&t.w_q.t()) + g_km.dot(&t.w_k.t()) + g_v.dot(&t.w_v.t()));

    // Input embedding; the chain stops here, the base codebook is frozen.
    g.w_ei = tape.c.t().dot(&g_h0);
    g.b_ei = g_h0.sum_axis(Axis(0));

    Ok(g)
}

/// Report of one projector training step: loss before and after, and the
/// displacement norm of every row of `C'`.
#[derive(Debug, Clone)]
pub struct TrainStepReport {
    pub winner: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub row_displacements: Vec<f64>,
}

/// One gradient step on the projector from the winner-row embedding loss.
///
/// The base codebook is read, never written; the report carries how far
/// each transformed code moved.
pub fn train_step(
    params: &mut ProjectorParams,
    base: &Codebook,
    e_x: ArrayView1<'_, f64>,
    winner: usize,
    lr: f64,
) -> Result<TrainStepReport> {
    if winner >= base.k() {
        return Err(Error::IndexOutOfRange { index: winner, len: base.k() });
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::InvalidConfig(format!("lr {lr} must be finite and >= 0")));
    }
    let (before, tape) = project(params, base)?;
    let (loss_before, grad_winner) = embedding_loss(before.code(winner), e_x)?;
    let mut upstream = Array2::zeros(before.codes().dim());
    upstream.row_mut(winner).assign(&grad_winner);
    let grads = backward(params, &tape, upstream.view())?;
    params.apply_gradients(&grads, lr)?;
    let (after, _) = project(params, base)?;
    let (loss_after, _) = embedding_loss(after.code(winner), e_x)?;
    let row_displacements = (0..base.k())
        .map(|j| {
            let diff = &after.code(j) - &before.code(j);
            diff.dot(&diff).sqrt()
        })
        .collect();
    Ok(TrainStepReport { winner, loss_before, loss_after, row_displacements })
}

/// Max relative disagreement between analytic and central-difference
/// gradients over every parameter, for a winner-row embedding loss probe.
pub fn gradient_check(params: &ProjectorParams, base: &Codebook, epsilon: f64) -> Result<f64> {
    gradient_check_with_fault(params, base, epsilon, None)
}

/// [`gradient_check`] with an optional injected fault: the named tensor's
/// analytic gradient is doubled before comparison, so a correct
/// implementation reports a large disagreement.
pub fn gradient_check_with_fault(
    params: &ProjectorParams,
    base: &Codebook,
    epsilon: f64,
    fault: Option<TensorId>,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    // Deterministic probe: winner row 0, encoder output offset from it.
    let winner = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9A0B);
    let e_x = Array1::from_shape_fn(base.dim(), |j| {
        base.code(winner)[j] + 1.0 + 0.5 * rng.sample::<f64, _>(StandardNormal) + 0.1 * j as f64
    });

    let loss_of = |p: &ProjectorParams| -> Result<f64> {
        let (projected, _) = project(p, base)?;
        Ok(embedding_loss(projected.code(winner), e_x.view())?.0)
    };

    let (projected, tape) = project(params, base)?;
    let (_, grad_winner) = embedding_loss(projected.code(winner), e_x.view())?;
    let mut upstream = Array2::zeros(projected.codes().dim());
    upstream.row_mut(winner).assign(&grad_winner);
    let mut grads = backward(params, &tape, upstream.view())?;
    if let Some(id) = fault {
        for v in grads.tensor_mut(id) {
            *v *= 2.0;
        }
    }

    // Relative error per parameter tensor: central differences over every
    // entry, compared against the analytic gradient in the Euclidean norm.
    let mut worst = 0.0f64;
    let mut scratch = params.clone();
    for id in ALL_TENSORS {
        let len = params.tensor(id).len();
        let mut diff_sq = 0.0;
        let mut analytic_sq = 0.0;
        let mut cd_sq = 0.0;
        for i in 0..len {
            let original = params.tensor(id)[i];
            scratch.tensor_mut(id)[i] = original + epsilon;
            let plus = loss_of(&scratch)?;
            scratch.tensor_mut(id)[i] = original - epsilon;
            let minus = loss_of(&scratch)?;
            scratch.tensor_mut(id)[i] = original;
            let cd = (plus - minus) / (2.0 * epsilon);
            let analytic = grads.tensor(id)[i];
            diff_sq += (analytic - cd) * (analytic - cd);
            analytic_sq += analytic * analytic;
            cd_sq += cd * cd;
        }
        let rel = diff_sq.sqrt() / (analytic_sq.sqrt() + cd_sq.sqrt() + 1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
