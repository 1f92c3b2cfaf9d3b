//! Layer topologies and parameter containers shared by the classifier and
//! the purification autoencoder.

use std::fmt;
use std::ops::Range;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Gelu,
    Sigmoid,
    Flatten,
}

impl Layer {
    /// Shapes of `[weight, bias]`, or nothing for parameter-free layers.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Layer::Conv2d { in_channels, out_channels, kernel, .. } => {
                vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]]
            }
            Layer::ConvTranspose2d { in_channels, out_channels, kernel, .. } => {
                vec![vec![in_channels, out_channels, kernel, kernel], vec![out_channels]]
            }
            Layer::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            Layer::Gelu | Layer::Sigmoid | Layer::Flatten => Vec::new(),
        }
    }

    /// `(fan_in, fan_out)` of the weight.
    fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            Layer::Conv2d { in_channels, out_channels, kernel, .. }
            | Layer::ConvTranspose2d { in_channels, out_channels, kernel, .. } => {
                Some((in_channels * kernel * kernel, out_channels * kernel * kernel))
            }
            Layer::Dense { inputs, outputs } => Some((inputs, outputs)),
            _ => None,
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layer::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                write!(f, "conv({in_channels}>{out_channels},k{kernel},s{stride},p{padding})")
            }
            Layer::ConvTranspose2d { in_channels, out_channels, kernel, stride, padding, output_padding } => {
                write!(f, "tconv({in_channels}>{out_channels},k{kernel},s{stride},p{padding},op{output_padding})")
            }
            Layer::Dense { inputs, outputs } => write!(f, "dense({inputs}>{outputs})"),
            Layer::Gelu => f.write_str("gelu"),
            Layer::Sigmoid => f.write_str("sigmoid"),
            Layer::Flatten => f.write_str("flatten"),
        }
    }
}

impl std::str::FromStr for Layer {
    type Err = Error;

    /// Parses the [`fmt::Display`] form.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad layer {s:?}"));
        match s {
            "gelu" => return Ok(Layer::Gelu),
            "sigmoid" => return Ok(Layer::Sigmoid),
            "flatten" => return Ok(Layer::Flatten),
            _ => {}
        }
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let mut parts = args.split(',');
        let (i, o) = parts.next().and_then(|io| io.split_once('>')).ok_or_else(bad)?;
        let (i, o): (usize, usize) = (i.parse().map_err(|_| bad())?, o.parse().map_err(|_| bad())?);
        let mut field = |prefix: &str| -> Result<usize> {
            parts.next().and_then(|p| p.strip_prefix(prefix)).and_then(|v| v.parse().ok()).ok_or_else(bad)
        };
        let layer = match name {
            "dense" => Layer::Dense { inputs: i, outputs: o },
            "conv" => Layer::Conv2d {
                in_channels: i,
                out_channels: o,
                kernel: field("k")?,
                stride: field("s")?,
                padding: field("p")?,
            },
            "tconv" => Layer::ConvTranspose2d {
                in_channels: i,
                out_channels: o,
                kernel: field("k")?,
                stride: field("s")?,
                padding: field("p")?,
                output_padding: field("op")?,
            },
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(layer)
    }
}

/// Inverse of [`topology_descriptor`].
pub fn parse_topology(s: &str) -> Result<Vec<Layer>> {
    s.split('-').map(str::parse).collect()
}

/// Canonical text form of a topology, e.g. `conv(1>16,k3,s1,p1)-gelu-...`.
pub fn topology_descriptor(layers: &[Layer]) -> String {
    layers.iter().map(Layer::to_string).collect::<Vec<_>>().join("-")
}

/// First 16 hex digits of the SHA-256 of the descriptor.
pub fn topology_hash(layers: &[Layer]) -> String {
    let digest = Sha256::digest(topology_descriptor(layers).as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// A feed-forward stack of layers with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Network<T> {
    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(layers: Vec<Layer>, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let mut params = Vec::new();
        for layer in &layers {
            let shapes = layer.param_shapes();
            if let (Some((fan_in, fan_out)), [w, b]) = (layer.fans(), shapes.as_slice()) {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                params.push(Tensor::from_fn(w.clone(), |_| T::lit(rng.gen_range(-bound..bound))));
                params.push(Tensor::zeros(b.clone()));
            }
        }
        Self { layers, params }
    }

    pub fn from_flat(layers: Vec<Layer>, flat: &[T]) -> Result<Self> {
        let mut net = Self { params: Vec::new(), layers };
        let expected = net.layers.iter().flat_map(Layer::param_shapes).map(|s| s.iter().product::<usize>()).sum();
        if flat.len() != expected {
            return Err(Error::invalid(format!("expected {expected} parameters, got {}", flat.len())));
        }
        let mut offset = 0;
        for shape in net.layers.iter().flat_map(Layer::param_shapes) {
            let n: usize = shape.iter().product();
            net.params.push(Tensor::new(shape, flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn topology(&self) -> String {
        topology_descriptor(&self.layers)
    }

    pub fn topology_hash(&self) -> String {
        topology_hash(&self.layers)
    }

    /// First 8 bytes of SHA-256 over the topology and the parameters as
    /// little-endian `f64`, in hex.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.topology().as_bytes());
        for p in &self.params {
            for v in p.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network { layers: self.layers.clone(), params: self.params.iter().map(Tensor::cast).collect() }
    }

    /// Registers every parameter on `g`, in layer order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Records `layers[range]` applied to `x`, using parameters from `bind`.
    pub fn apply(&self, g: &mut Graph<T>, vars: &[Var], x: Var, range: Range<usize>) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid("parameter bindings do not match the network"));
        }
        let mut p = self.layers[..range.start].iter().map(|l| l.param_shapes().len()).sum::<usize>();
        let mut h = x;
        for layer in &self.layers[range] {
            h = match *layer {
                Layer::Conv2d { stride, padding, .. } => {
                    let out = g.conv2d(h, vars[p], vars[p + 1], stride, padding)?;
                    p += 2;
                    out
                }
                Layer::ConvTranspose2d { stride, padding, output_padding, .. } => {
                    let out = g.conv_transpose2d(h, vars[p], vars[p + 1], stride, padding, output_padding)?;
                    p += 2;
                    out
                }
                Layer::Dense { .. } => {
                    let out = g.dense(h, vars[p], vars[p + 1])?;
                    p += 2;
                    out
                }
                Layer::Gelu => g.gelu(h),
                Layer::Sigmoid => g.sigmoid(h),
                Layer::Flatten => g.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Inference over `layers[range]`.
    pub fn forward_range(&self, x: &Tensor<T>, range: Range<usize>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.apply(&mut g, &vars, xv, range)?;
        Ok(g.value(out).clone())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_range(x, 0..self.layers.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Vec<Layer> {
        vec![
            Layer::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 2, padding: 1 },
            Layer::Gelu,
            Layer::Flatten,
            Layer::Dense { inputs: 2 * 3 * 3, outputs: 4 },
        ]
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Network::<f32>::init(tiny(), 3);
        assert_eq!(a, Network::<f32>::init(tiny(), 3));
        assert_ne!(a, Network::<f32>::init(tiny(), 4));
        let bound = (6.0f32 / (9.0 + 18.0)).sqrt();
        assert!(a.params()[0].data().iter().all(|v| v.abs() <= bound));
        assert!(a.params()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_round_trip() {
        let a = Network::<f64>::init(tiny(), 9);
        let b = Network::from_flat(tiny(), &a.flat_params()).unwrap();
        assert_eq!(a, b);
        assert!(Network::<f64>::from_flat(tiny(), &[0.0; 3]).is_err());
    }

    #[test]
    fn forward_shape_and_hash() {
        let net = Network::<f32>::init(tiny(), 1);
        let y = net.forward(&Tensor::zeros([2, 1, 5, 5])).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert_eq!(net.topology(), "conv(1>2,k3,s2,p1)-gelu-flatten-dense(18>4)");
        assert_eq!(net.topology_hash().len(), 16);
        let mut other = tiny();
        other[3] = Layer::Dense { inputs: 18, outputs: 5 };
        assert_ne!(topology_hash(&other), net.topology_hash());
    }

    #[test]
    fn descriptor_round_trip() {
        let mut layers = tiny();
        layers.push(Layer::ConvTranspose2d {
            in_channels: 4,
            out_channels: 1,
            kernel: 4,
            stride: 2,
            padding: 1,
            output_padding: 1,
        });
        layers.push(Layer::Sigmoid);
        assert_eq!(parse_topology(&topology_descriptor(&layers)).unwrap(), layers);
        for bad in ["conv(1>2,k3,s2)", "dense(3)", "relu", "conv(1>2,k3,s2,p1,x)", "tconv(1>2,k3,s2,p1)"] {
            assert!(parse_topology(bad).is_err(), "{bad}");
        }
    }
}
