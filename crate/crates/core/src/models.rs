//! Four small multi-label classifier architectures, the logits-space
//! ensemble, and the AXMD checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bytesio::Reader;
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const MLP_WIDTH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchTag {
    Linear,
    Mlp,
    CnnSmall,
    CnnWide,
}

impl ArchTag {
    pub const ALL: [ArchTag; 4] = [
        ArchTag::Linear,
        ArchTag::Mlp,
        ArchTag::CnnSmall,
        ArchTag::CnnWide,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchTag::Linear => "linear",
            ArchTag::Mlp => "mlp",
            ArchTag::CnnSmall => "cnn_small",
            ArchTag::CnnWide => "cnn_wide",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ArchTag::Linear),
            "mlp" => Ok(ArchTag::Mlp),
            "cnn_small" => Ok(ArchTag::CnnSmall),
            "cnn_wide" => Ok(ArchTag::CnnWide),
            _ => Err(Error::invalid(format!("unknown architecture {s:?}"))),
        }
    }

    fn byte(self) -> u8 {
        match self {
            ArchTag::Linear => 0,
            ArchTag::Mlp => 1,
            ArchTag::CnnSmall => 2,
            ArchTag::CnnWide => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ArchTag::Linear),
            1 => Ok(ArchTag::Mlp),
            2 => Ok(ArchTag::CnnSmall),
            3 => Ok(ArchTag::CnnWide),
            _ => Err(Error::invalid(format!("unknown architecture byte {b}"))),
        }
    }
}

fn conv_out(s: usize, k: usize) -> Result<usize> {
    if s < k {
        return Err(Error::invalid(format!(
            "spatial size {s} too small for a {k}x{k} convolution"
        )));
    }
    Ok(s - k + 1)
}

fn pool_out(s: usize) -> Result<usize> {
    if s < 2 {
        return Err(Error::invalid(format!(
            "spatial size {s} too small for 2x2 max-pool"
        )));
    }
    Ok(s / 2)
}

/// Flattened feature width entering the final linear layer.
fn flat_features(arch: ArchTag, side: usize) -> Result<usize> {
    match arch {
        ArchTag::Linear | ArchTag::Mlp => Ok(side * side),
        ArchTag::CnnSmall => {
            let s = pool_out(conv_out(side, 3)?)?;
            let s = pool_out(conv_out(s, 3)?)?;
            Ok(16 * s * s)
        }
        ArchTag::CnnWide => {
            let s = pool_out(conv_out(side, 3)?)?;
            let s = conv_out(s, 3)?;
            let s = pool_out(conv_out(s, 3)?)?;
            Ok(16 * s * s)
        }
    }
}

/// Parameter tensor shapes, in checkpoint order.
pub fn param_shapes(arch: ArchTag, side: usize, num_labels: usize) -> Result<Vec<Vec<usize>>> {
    let flat = flat_features(arch, side)?;
    Ok(match arch {
        ArchTag::Linear => vec![vec![flat, num_labels], vec![num_labels]],
        ArchTag::Mlp => vec![
            vec![flat, MLP_WIDTH],
            vec![MLP_WIDTH],
            vec![MLP_WIDTH, num_labels],
            vec![num_labels],
        ],
        ArchTag::CnnSmall => vec![
            vec![8, 1, 3, 3],
            vec![8],
            vec![16, 8, 3, 3],
            vec![16],
            vec![flat, num_labels],
            vec![num_labels],
        ],
        ArchTag::CnnWide => vec![
            vec![8, 1, 3, 3],
            vec![8],
            vec![16, 8, 3, 3],
            vec![16],
            vec![16, 16, 3, 3],
            vec![16],
            vec![flat, num_labels],
            vec![num_labels],
        ],
    })
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchTag,
    pub side: usize,
    pub num_labels: usize,
    params: Vec<Tensor>,
}

impl Model {
    /// Seeded uniform init scaled by fan-in; bias tensors start at zero.
    pub fn init(arch: ArchTag, side: usize, num_labels: usize, seed: u64) -> Result<Model> {
        let shapes = param_shapes(arch, side, num_labels)?;
        let mut params = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            if shape.len() == 1 {
                params.push(Tensor::zeros(shape));
                continue;
            }
            let fan_in: usize = match shape.len() {
                2 => shape[0],
                4 => shape[1] * shape[2] * shape[3],
                _ => n,
            };
            let bound = (1.0 / fan_in as f64).sqrt();
            let mut rng = stream_rng(seed, i as u64);
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Tensor::new(shape.clone(), data)?);
        }
        Ok(Model {
            arch,
            side,
            num_labels,
            params,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub(crate) fn with_params(&self, params: Vec<Tensor>) -> Model {
        debug_assert_eq!(params.len(), self.params.len());
        Model {
            arch: self.arch,
            side: self.side,
            num_labels: self.num_labels,
            params,
        }
    }

    /// Build a model from explicit parameter tensors, validating shapes.
    pub fn from_params(
        arch: ArchTag,
        side: usize,
        num_labels: usize,
        params: Vec<Tensor>,
    ) -> Result<Model> {
        let shapes = param_shapes(arch, side, num_labels)?;
        if params.len() != shapes.len()
            || params.iter().zip(&shapes).any(|(p, s)| p.shape() != &s[..])
        {
            return Err(Error::invalid(format!(
                "{}: parameter shapes {:?} do not match expected {:?}",
                arch.name(),
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>(),
                shapes
            )));
        }
        Ok(Model {
            arch,
            side,
            num_labels,
            params,
        })
    }

    /// Register the parameters on a tape so a forward pass can be recorded.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf_grad(p.clone())
                } else {
                    tape.leaf(p.clone())
                }
            })
            .collect();
        BoundModel {
            arch: self.arch,
            side: self.side,
            num_labels: self.num_labels,
            vars,
        }
    }

    /// Inference without gradient tracking. Enforces the [0,1] image range
    /// and spatial size at this boundary.
    pub fn forward_logits(&self, images: &Tensor) -> Result<Tensor> {
        validate_images(images, self.side)?;
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let bound = self.bind(&mut tape, false);
        let logits = bound.forward(&mut tape, x)?;
        let out = tape.value(logits).clone();
        if !out.all_finite() {
            return Err(Error::NonFinite("forward_logits".into()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(AXMD_MAGIC);
        buf.extend_from_slice(&AXMD_VERSION.to_le_bytes());
        buf.push(self.arch.byte());
        buf.extend_from_slice(&(self.num_labels as u16).to_le_bytes());
        buf.extend_from_slice(&(self.side as u16).to_le_bytes());
        for p in &self.params {
            buf.push(p.rank() as u8);
            for &e in p.shape() {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader::new(&bytes, path);
        if r.take(4)? != AXMD_MAGIC {
            return Err(r.error("bad magic, not an AXMD checkpoint"));
        }
        let version = r.u16()?;
        if version != AXMD_VERSION {
            return Err(r.error(format!("unsupported AXMD version {version}")));
        }
        let arch = ArchTag::from_byte(r.u8()?)?;
        let num_labels = r.u16()? as usize;
        let side = r.u16()? as usize;
        let shapes = param_shapes(arch, side, num_labels)?;
        let mut params = Vec::with_capacity(shapes.len());
        for expected in &shapes {
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            if &shape != expected {
                return Err(r.error(format!(
                    "parameter shape {shape:?} does not match architecture (expected {expected:?})"
                )));
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            params.push(Tensor::new(shape, data)?);
        }
        r.expect_end()?;
        Ok(Model {
            arch,
            side,
            num_labels,
            params,
        })
    }
}

pub(crate) fn validate_images(images: &Tensor, side: usize) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != side || s[3] != side {
        return Err(Error::ShapeMismatch {
            op: "forward_logits",
            lhs: s.to_vec(),
            rhs: vec![0, 1, side, side],
        });
    }
    if !images.in_unit_range() {
        return Err(Error::invalid("image values must lie in [0,1]"));
    }
    Ok(())
}

/// A model whose parameters are registered on a tape.
pub struct BoundModel {
    arch: ArchTag,
    side: usize,
    num_labels: usize,
    vars: Vec<Var>,
}

impl BoundModel {
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    /// Record the forward pass from an image batch node to a logits node.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.value(x).shape()[0];
        let v = &self.vars;
        match self.arch {
            ArchTag::Linear => {
                let flat = tape.reshape(x, vec![n, self.side * self.side])?;
                let h = tape.matmul(flat, v[0])?;
                tape.add_row_bias(h, v[1])
            }
            ArchTag::Mlp => {
                let flat = tape.reshape(x, vec![n, self.side * self.side])?;
                let h = tape.matmul(flat, v[0])?;
                let h = tape.add_row_bias(h, v[1])?;
                let h = tape.relu(h);
                let h = tape.matmul(h, v[2])?;
                tape.add_row_bias(h, v[3])
            }
            ArchTag::CnnSmall => {
                let h = tape.conv2d(x, v[0])?;
                let h = tape.add_chan_bias(h, v[1])?;
                let h = tape.relu(h);
                let h = tape.max_pool2(h)?;
                let h = tape.conv2d(h, v[2])?;
                let h = tape.add_chan_bias(h, v[3])?;
                let h = tape.relu(h);
                let h = tape.max_pool2(h)?;
                let flat = flat_features(self.arch, self.side)?;
                let h = tape.reshape(h, vec![n, flat])?;
                let h = tape.matmul(h, v[4])?;
                tape.add_row_bias(h, v[5])
            }
            ArchTag::CnnWide => {
                let h = tape.conv2d(x, v[0])?;
                let h = tape.add_chan_bias(h, v[1])?;
                let h = tape.relu(h);
                let h = tape.max_pool2(h)?;
                let h = tape.conv2d(h, v[2])?;
                let h = tape.add_chan_bias(h, v[3])?;
                let h = tape.relu(h);
                let h = tape.conv2d(h, v[4])?;
                let h = tape.add_chan_bias(h, v[5])?;
                let h = tape.relu(h);
                let h = tape.max_pool2(h)?;
                let flat = flat_features(self.arch, self.side)?;
                let h = tape.reshape(h, vec![n, flat])?;
                let h = tape.matmul(h, v[6])?;
                tape.add_row_bias(h, v[7])
            }
        }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }
}

const AXMD_MAGIC: &[u8; 4] = b"AXMD";
const AXMD_VERSION: u16 = 1;

/// Logits-space ensemble: l(x) = sum_k w_k * l_k(x).
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    members: Vec<Model>,
    weights: Vec<f64>,
}

impl EnsembleModel {
    pub fn new(members: Vec<Model>, weights: Vec<f64>) -> Result<EnsembleModel> {
        if members.is_empty() || members.len() != weights.len() {
            return Err(Error::invalid(
                "ensemble needs one weight per member and at least one member",
            ));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("ensemble weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "ensemble weights sum to {total}, expected 1 within 1e-9"
            )));
        }
        let side = members[0].side;
        let labels = members[0].num_labels;
        if members
            .iter()
            .any(|m| m.side != side || m.num_labels != labels)
        {
            return Err(Error::invalid(
                "ensemble members must share input size and label count",
            ));
        }
        Ok(EnsembleModel { members, weights })
    }

    pub fn uniform(members: Vec<Model>) -> Result<EnsembleModel> {
        let k = members.len();
        Self::new(members, vec![1.0 / k as f64; k])
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn side(&self) -> usize {
        self.members[0].side
    }

    pub fn num_labels(&self) -> usize {
        self.members[0].num_labels
    }

    /// Record the weighted-sum forward pass; differentiable through all
    /// members.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (model, &w) in self.members.iter().zip(&self.weights) {
            let bound = model.bind(tape, false);
            let logits = bound.forward(tape, x)?;
            let scaled = tape.scale(logits, w);
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled)?,
                None => scaled,
            });
        }
        Ok(acc.expect("ensemble has at least one member"))
    }

    pub fn forward_logits(&self, images: &Tensor) -> Result<Tensor> {
        validate_images(images, self.side())?;
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let out = self.forward_on_tape(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }
}
