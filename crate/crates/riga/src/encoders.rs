//! Set encoders and projection heads: Ψ_g and Ψ_s map PPF signature sets to
//! fixed-width descriptors; two projection MLPs map attended descriptors to
//! the matching width.

use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ppf::SignatureSet;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

/// Architecture widths. The defaults are the published configuration
/// (4 → 64 → 256 set encoders, width 256, 4 heads, 6 blocks, projection
/// [256, 128, 64, 32]); tests use `tiny()` for cheap exact checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub ppf_in: usize,
    pub pointnet_hidden: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub proj_dims: Vec<usize>,
    /// Apply relu to the last per-point layer before max-pooling.
    pub relu_before_pool: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            ppf_in: 4,
            pointnet_hidden: 64,
            width: 256,
            heads: 4,
            blocks: 6,
            proj_dims: vec![256, 128, 64, 32],
            relu_before_pool: true,
        }
    }
}

impl ModelDims {
    /// Small architecture for fast exact tests.
    pub fn tiny() -> Self {
        ModelDims {
            ppf_in: 4,
            pointnet_hidden: 8,
            width: 16,
            heads: 4,
            blocks: 1,
            proj_dims: vec![16, 8, 4],
            relu_before_pool: true,
        }
    }

    /// Derive projection widths by halving: width 256 gives [256,128,64,32].
    pub fn proj_dims_for(width: usize) -> Vec<usize> {
        vec![width, width / 2, width / 4, (width / 8).max(1)]
    }

    pub fn out_width(&self) -> usize {
        *self.proj_dims.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ppf_in == 0 || self.pointnet_hidden == 0 || self.width == 0 {
            return Err(Error::InvalidInput("model widths must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidInput(format!(
                "width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.proj_dims.len() < 2 || self.proj_dims[0] != self.width {
            return Err(Error::InvalidInput(format!(
                "projection dims {:?} must start at width {}",
                self.proj_dims, self.width
            )));
        }
        if self.proj_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput("projection dims must be positive".into()));
        }
        Ok(())
    }
}

/// Which set encoder a signature feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiKind {
    /// Ψ_g over local support signatures.
    Geometric,
    /// Ψ_s over global node signatures.
    Structural,
}

impl PsiKind {
    pub fn prefix(self) -> &'static str {
        match self {
            PsiKind::Geometric => "psi_g",
            PsiKind::Structural => "psi_s",
        }
    }
}

/// Which projection head maps an attended descriptor to matching width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionHead {
    /// MLP_c on node descriptors.
    Coarse,
    /// MLP_f on dense per-point descriptors.
    Fine,
}

impl ProjectionHead {
    pub fn prefix(self) -> &'static str {
        match self {
            ProjectionHead::Coarse => "mlp_c",
            ProjectionHead::Fine => "mlp_f",
        }
    }
}

fn uniform_tensor(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (1.0 / rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn insert_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(&format!("{prefix}.weight"), uniform_tensor(rng, fan_in, fan_out))?;
    // Nonzero biases keep relu gating per-row at init; with zero biases the
    // shared positive mean of the features switches whole units, collapsing
    // untrained descriptors onto a handful of directions.
    let bound = (1.0 / fan_in as f64).sqrt();
    let bias = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    store.insert(&format!("{prefix}.bias"), Tensor::vector(bias))?;
    Ok(())
}

/// All model parameters, deterministically initialized from `seed`:
/// weights and biases uniform in ±√(1/fan_in), Sinkhorn slack α = 1.
pub fn init_params(dims: &ModelDims, seed: u64) -> Result<ParamStore> {
    dims.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for kind in [PsiKind::Geometric, PsiKind::Structural] {
        let p = kind.prefix();
        insert_linear(&mut store, &mut rng, &format!("{p}.layer0"), dims.ppf_in, dims.pointnet_hidden)?;
        insert_linear(&mut store, &mut rng, &format!("{p}.layer1"), dims.pointnet_hidden, dims.width)?;
    }
    let c = dims.width;
    for b in 0..dims.blocks {
        for module in ["intra", "inter"] {
            let p = format!("block{b}.{module}");
            store.insert(&format!("{p}.w_q"), uniform_tensor(&mut rng, c, c))?;
            store.insert(&format!("{p}.w_k"), uniform_tensor(&mut rng, c, c))?;
            store.insert(&format!("{p}.w_v"), uniform_tensor(&mut rng, c, c))?;
            insert_linear(&mut store, &mut rng, &format!("{p}.proj"), c, c)?;
            insert_linear(&mut store, &mut rng, &format!("{p}.mlp"), 2 * c, c)?;
        }
    }
    for head in [ProjectionHead::Coarse, ProjectionHead::Fine] {
        let p = head.prefix();
        for (i, w) in dims.proj_dims.windows(2).enumerate() {
            insert_linear(&mut store, &mut rng, &format!("{p}.layer{i}"), w[0], w[1])?;
        }
    }
    store.insert("sinkhorn.alpha", Tensor::scalar(1.0))?;
    Ok(store)
}

/// Verifies that a loaded store matches the shapes `dims` implies, naming
/// the first offending parameter.
pub fn check_shapes(loaded: &ParamStore, dims: &ModelDims) -> Result<()> {
    let reference = init_params(dims, 0)?;
    for (name, value, _) in reference.iter() {
        match loaded.get(name) {
            None => {
                return Err(Error::DimensionMismatch {
                    name: name.to_string(),
                    found: vec![],
                    expected: value.shape().to_vec(),
                })
            }
            Some(t) if t.shape() != value.shape() => {
                return Err(Error::DimensionMismatch {
                    name: name.to_string(),
                    found: t.shape().to_vec(),
                    expected: value.shape().to_vec(),
                })
            }
            _ => {}
        }
    }
    if loaded.len() != reference.len() {
        let extra = loaded
            .names()
            .find(|n| !reference.contains(n))
            .unwrap_or("?")
            .to_string();
        return Err(Error::DimensionMismatch {
            name: extra,
            found: vec![loaded.len()],
            expected: vec![reference.len()],
        });
    }
    Ok(())
}

/// Flatten a signature set into an [S, 4] quadruple matrix.
pub fn signature_tensor(sig: &SignatureSet) -> Result<Tensor> {
    if sig.quadruples.is_empty() {
        return Err(Error::InvalidInput(
            "cannot encode an empty signature set".into(),
        ));
    }
    let mut data = Vec::with_capacity(sig.quadruples.len() * 4);
    for q in &sig.quadruples {
        data.extend_from_slice(&q.to_array());
    }
    Tensor::matrix(sig.quadruples.len(), 4, data)
}

/// Shared per-point MLP over stacked quadruples followed by per-segment
/// max-pooling. `quads` is [ΣS, in] and `segments` lists each set's row
/// range; the result is [|segments|, width].
pub(crate) fn pointnet_forward(
    tape: &mut Tape,
    store: &ParamStore,
    kind: PsiKind,
    quads: Tensor,
    segments: &[(usize, usize)],
    dims: &ModelDims,
) -> Result<Var> {
    let p = kind.prefix();
    let w0 = tape.param(store, &format!("{p}.layer0.weight"))?;
    let b0 = tape.param(store, &format!("{p}.layer0.bias"))?;
    let w1 = tape.param(store, &format!("{p}.layer1.weight"))?;
    let b1 = tape.param(store, &format!("{p}.layer1.bias"))?;
    let x = tape.constant(quads);
    let h = tape.matmul(x, w0)?;
    let h = tape.add_row_vec(h, b0)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, w1)?;
    let mut h = tape.add_row_vec(h, b1)?;
    if dims.relu_before_pool {
        h = tape.relu(h);
    }
    tape.segment_max(h, segments)
}

/// Encode one signature set to a width-`c` descriptor (inference
/// convenience; the pipeline batches all sets of a cloud instead).
pub fn pointnet_encode(
    store: &ParamStore,
    dims: &ModelDims,
    kind: PsiKind,
    sig: &SignatureSet,
) -> Result<Tensor> {
    let quads = signature_tensor(sig)?;
    let n = quads.rows();
    let mut tape = Tape::new();
    let out = pointnet_forward(&mut tape, store, kind, quads, &[(0, n)], dims)?;
    Ok(Tensor::vector(tape.value(out).data().to_vec()))
}

/// d⁽⁰⁾ = g ⊕ s, element-wise.
pub fn inform_descriptor(g: &Tensor, s: &Tensor) -> Result<Tensor> {
    if g.shape() != s.shape() {
        return Err(Error::Shape(format!(
            "inform_descriptor needs equal shapes, got {:?} and {:?}",
            g.shape(),
            s.shape()
        )));
    }
    Ok(g.zip(s, |a, b| a + b))
}

/// Linear → relu chain over `proj_dims`, last layer linear, rows scaled to
/// unit norm. Matching scores are therefore cosines and feature distances
/// live in [0, 2], the range the circle-loss margins assume. Input is
/// [N, width], output [N, out_width].
pub(crate) fn projection_forward(
    tape: &mut Tape,
    store: &ParamStore,
    head: ProjectionHead,
    mut x: Var,
    dims: &ModelDims,
) -> Result<Var> {
    let p = head.prefix();
    let layers = dims.proj_dims.len() - 1;
    for i in 0..layers {
        let w = tape.param(store, &format!("{p}.layer{i}.weight"))?;
        let b = tape.param(store, &format!("{p}.layer{i}.bias"))?;
        x = tape.matmul(x, w)?;
        x = tape.add_row_vec(x, b)?;
        if i + 1 < layers {
            x = tape.relu(x);
        }
    }
    tape.normalize_rows(x)
}

/// Project one attended descriptor to matching width.
pub fn project_descriptor(
    store: &ParamStore,
    dims: &ModelDims,
    head: ProjectionHead,
    d: &Tensor,
) -> Result<Tensor> {
    if d.numel() != dims.width {
        return Err(Error::Shape(format!(
            "projection input must have width {}, got {}",
            dims.width,
            d.numel()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, dims.width, d.data().to_vec())?);
    let out = projection_forward(&mut tape, store, head, x, dims)?;
    Ok(Tensor::vector(tape.value(out).data().to_vec()))
}
