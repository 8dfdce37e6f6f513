use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{FeedForwardNetwork, InputNormalizer, NetworkShape, NnError};
use crate::autodiff::{Activation, Tensor};

/// Flat serialisable form of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub shape: NetworkShape,
    pub params: Vec<Vec<f64>>,
    pub norm_mean: Vec<f64>,
    pub norm_var: Vec<f64>,
    pub norm_initialised: bool,
}

impl From<&FeedForwardNetwork> for NetworkRecord {
    fn from(net: &FeedForwardNetwork) -> Self {
        Self {
            shape: *net.shape(),
            params: net.params().iter().map(|p| p.data().to_vec()).collect(),
            norm_mean: net.normalizer().mean.clone(),
            norm_var: net.normalizer().var.clone(),
            norm_initialised: net.normalizer().initialised,
        }
    }
}

impl NetworkRecord {
    pub fn into_network(self) -> Result<FeedForwardNetwork, NnError> {
        let shapes = self.shape.tensor_shapes();
        if shapes.len() != self.params.len() {
            return Err(NnError::Checkpoint("wrong number of parameter arrays".into()));
        }
        let mut params = Vec::with_capacity(shapes.len());
        for ((r, c), data) in shapes.into_iter().zip(self.params) {
            if data.len() != r * c {
                return Err(NnError::Checkpoint(format!(
                    "parameter array of length {} where {r}x{c} was expected",
                    data.len()
                )));
            }
            params.push(Tensor::from_vec(r, c, data));
        }
        let mut norm = InputNormalizer::new(self.shape.input_dim);
        norm.mean = self.norm_mean;
        norm.var = self.norm_var;
        norm.initialised = self.norm_initialised;
        FeedForwardNetwork::from_parts(self.shape, params, norm)
    }
}

const MAGIC: &[u8; 4] = b"FFN1";

fn activation_code(a: Activation) -> u64 {
    Activation::ALL.iter().position(|x| *x == a).unwrap() as u64
}

/// Binary layout: magic `FFN1`, then little-endian `u64` header
/// `[input, output, layers, hidden, activation, initialised]`, then the
/// normaliser mean and variance and every parameter tensor as little-endian
/// `f64` in storage order.
pub fn write_binary<W: Write>(net: &FeedForwardNetwork, mut w: W) -> Result<(), NnError> {
    let s = net.shape();
    w.write_all(MAGIC)?;
    for v in [
        s.input_dim as u64,
        s.output_dim as u64,
        s.layers as u64,
        s.hidden as u64,
        activation_code(s.activation),
        net.normalizer().initialised as u64,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let norm = net.normalizer();
    let floats = norm
        .mean
        .iter()
        .chain(&norm.var)
        .chain(net.params().iter().flat_map(|p| p.data()));
    for x in floats {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<FeedForwardNetwork, NnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let mut header = [0u64; 6];
    let mut buf = [0u8; 8];
    for h in header.iter_mut() {
        r.read_exact(&mut buf)?;
        *h = u64::from_le_bytes(buf);
    }
    let activation = *Activation::ALL
        .get(header[4] as usize)
        .ok_or_else(|| NnError::Checkpoint("unknown activation code".into()))?;
    let shape = NetworkShape {
        input_dim: header[0] as usize,
        output_dim: header[1] as usize,
        layers: header[2] as usize,
        hidden: header[3] as usize,
        activation,
    };
    if shape.layers == 0 || shape.param_count() > 1 << 28 {
        return Err(NnError::Checkpoint("implausible header".into()));
    }
    let mut read_vec = |n: usize| -> Result<Vec<f64>, NnError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let norm_mean = read_vec(shape.input_dim)?;
    let norm_var = read_vec(shape.input_dim)?;
    let mut params = Vec::new();
    for (rows, cols) in shape.tensor_shapes() {
        params.push(read_vec(rows * cols)?);
    }
    NetworkRecord {
        shape,
        params,
        norm_mean,
        norm_var,
        norm_initialised: header[5] != 0,
    }
    .into_network()
}
