//! The 16-layer convolutional recognition stack used for hypercolumns.
//!
//! Layer indexing matches the upstream `features` sequence: convolutions at
//! fixed indices, each followed by a ReLU, with 2x2 max-pools between
//! stages. Only the feature stack exists here (no classifier head), and
//! only gradients with respect to the input are ever formed.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{Array2, Ix4};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::{sc, Scalar};
use crate::weights::{TensorMap, VGG16_CONVS, VGG16_POOLS};

struct ConvLayer<T: Scalar> {
    feature_idx: usize,
    /// Kernel flattened to (c_out, c_in * 9).
    wmat: Arc<Array2<T>>,
    bias: Vec<T>,
    c_in: usize,
}

pub struct VggFeatures<T: Scalar> {
    convs: Vec<ConvLayer<T>>,
    forward_count: AtomicUsize,
}

/// Highest addressable layer index (the final ReLU).
pub const MAX_LAYER: usize = 29;

impl<T: Scalar> VggFeatures<T> {
    pub fn from_tensors(map: &TensorMap) -> Result<Self> {
        let mut convs = Vec::with_capacity(VGG16_CONVS.len());
        for (idx, c_in, c_out) in VGG16_CONVS {
            let w = map.get(&format!("features.{idx}.weight"))?;
            let b = map.get(&format!("features.{idx}.bias"))?;
            let w4 = w
                .view()
                .into_dimensionality::<Ix4>()
                .map_err(|_| Error::weights(format!("features.{idx}.weight is not 4-d")))?;
            if w4.dim() != (c_out, c_in, 3, 3) {
                return Err(Error::weights(format!(
                    "features.{idx}.weight has shape {:?}, expected ({c_out}, {c_in}, 3, 3)",
                    w4.dim()
                )));
            }
            if b.len() != c_out {
                return Err(Error::weights(format!("features.{idx}.bias length mismatch")));
            }
            let mut wmat = Array2::<T>::zeros((c_out, c_in * 9));
            for o in 0..c_out {
                for i in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            wmat[(o, (i * 3 + ky) * 3 + kx)] =
                                sc::<T>(w4[(o, i, ky, kx)] as f64);
                        }
                    }
                }
            }
            let bias = b.iter().map(|&v| sc::<T>(v as f64)).collect();
            convs.push(ConvLayer {
                feature_idx: idx,
                wmat: Arc::new(wmat),
                bias,
                c_in,
            });
        }
        Ok(VggFeatures {
            convs,
            forward_count: AtomicUsize::new(0),
        })
    }

    /// Validate that `layers` are addressable for an `h x w` input and
    /// return the furthest index the walk must reach.
    fn validate(&self, layers: &[usize], h: usize, w: usize) -> Result<usize> {
        if layers.is_empty() {
            return Err(Error::invalid_argument("no hypercolumn layers requested"));
        }
        let max = *layers.iter().max().unwrap();
        if max > MAX_LAYER {
            return Err(Error::invalid_argument(format!(
                "layer {max} out of range (max {MAX_LAYER})"
            )));
        }
        let (mut ch, mut cw) = (h, w);
        for &p in VGG16_POOLS.iter() {
            if p > max {
                break;
            }
            if ch < 2 || cw < 2 {
                return Err(Error::invalid_argument(format!(
                    "input {h}x{w} too small to reach layer {max}"
                )));
            }
            ch /= 2;
            cw /= 2;
        }
        Ok(max)
    }

    /// Run the stack on a tape, returning the requested feature maps in the
    /// order given. `input` must be a normalized (3, H, W) node.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, layers: &[usize]) -> Result<Vec<Var>> {
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let shape = tape.value(input).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let max = self.validate(layers, h, w)?;

        // `idx` names a module in the stack; its output is "layer idx".
        let mut grabbed: Vec<(usize, Var)> = Vec::with_capacity(layers.len());
        let mut current = input;
        let mut conv_iter = self.convs.iter().peekable();
        for idx in 0..=max {
            if VGG16_POOLS.contains(&idx) {
                current = tape.maxpool2(current);
            } else if conv_iter.peek().is_some_and(|c| c.feature_idx == idx) {
                let layer = conv_iter.next().unwrap();
                current = tape.conv2d(current, layer.wmat.clone(), &layer.bias, 3, 1);
            } else {
                // Every non-pool, non-conv slot in the sequence is a ReLU.
                current = tape.relu(current);
            }
            if layers.contains(&idx) {
                grabbed.push((idx, current));
            }
        }

        let out = layers
            .iter()
            .map(|l| {
                grabbed
                    .iter()
                    .find(|(idx, _)| idx == l)
                    .map(|(_, v)| *v)
                    .expect("validated layer present")
            })
            .collect();
        Ok(out)
    }

    /// Number of forward passes run so far (used to verify feature caching).
    pub fn forward_count(&self) -> usize {
        self.forward_count.load(Ordering::Relaxed)
    }

    /// FNV-1a over the parameter bit patterns, in layer order.
    pub fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let eat = |bits: u64, h: &mut u64| {
            for b in bits.to_le_bytes() {
                *h ^= b as u64;
                *h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for layer in &self.convs {
            for v in layer.wmat.iter() {
                eat(v.f64_().to_bits(), &mut h);
            }
            for v in &layer.bias {
                eat(v.f64_().to_bits(), &mut h);
            }
            eat(layer.c_in as u64, &mut h);
        }
        h
    }
}

/// Channel widths of the default hypercolumn layers, used to size feature
/// matrices without running the network.
pub fn layer_channels(layer: usize) -> usize {
    // Channel width changes only at convs; walk the table.
    let mut ch = 3;
    for (idx, _c_in, c_out) in VGG16_CONVS {
        if idx > layer {
            break;
        }
        ch = c_out;
    }
    ch
}
