//! Named model parameters and their binary checkpoint format.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One dense layer: weight `[out, in]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Ordered map from layer name to its parameters.
///
/// Every real-valued coordinate of a model is addressable as
/// `(layer, row, col)` for weights or `(layer, index)` for biases, which is
/// what selective aggregation operates on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    layers: Vec<(String, LayerParams)>,
}

/// Gradient/tensor naming convention shared with the tape: `<layer>.w`,
/// `<layer>.b`.
pub fn weight_key(layer: &str) -> String {
    format!("{layer}.w")
}

pub fn bias_key(layer: &str) -> String {
    format!("{layer}.b")
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: LayerParams) {
        let name = name.into();
        debug_assert!(self.layer(&name).is_none(), "duplicate layer {name}");
        self.layers.push((name, layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, l)| l)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LayerParams> {
        self.layers.iter_mut().find(|(n, _)| n == name).map(|(_, l)| l)
    }

    pub fn layer_at(&self, idx: usize) -> (&str, &LayerParams) {
        let (n, l) = &self.layers[idx];
        (n, l)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LayerParams)> {
        self.layers.iter().map(|(n, l)| (n.as_str(), l))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut LayerParams)> {
        self.layers.iter_mut().map(|(n, l)| (n.as_str(), l))
    }

    /// Flat named-tensor view in layer order (weight before bias).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (name, layer) in &self.layers {
            out.push((weight_key(name), &layer.weight));
            out.push((bias_key(name), &layer.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (name, layer) in &mut self.layers {
            out.push((weight_key(name), &mut layer.weight));
            out.push((bias_key(name), &mut layer.bias));
        }
        out
    }

    /// Largest absolute difference across all coordinates of two equally
    /// shaped parameter sets.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        let mut worst: f64 = 0.0;
        for ((_, a), (_, b)) in self.layers.iter().zip(&other.layers) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                worst = worst.max((x - y).abs());
            }
            for (x, y) in a.bias.data().iter().zip(b.bias.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Writes named tensors as a flat, ordered list of
/// `(name, shape, raw 64-bit little-endian values)` records.
pub fn save_checkpoint(entries: &[(String, &Tensor)], w: &mut impl Write) -> Result<()> {
    write_u32(w, entries.len() as u32)?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        write_u32(w, bytes.len() as u32)?;
        w.write_all(bytes)?;
        write_u32(w, tensor.shape().len() as u32)?;
        for &d in tensor.shape() {
            write_u32(w, d as u32)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads back what [`save_checkpoint`] wrote.
pub fn load_checkpoint(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let count = read_u32(r)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("checkpoint name is not UTF-8".into()))?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

/// Restores a [`ParameterSet`] from checkpoint entries laid out by
/// [`ParameterSet::named_tensors`].
pub fn parameter_set_from_entries(entries: &[(String, Tensor)]) -> Result<ParameterSet> {
    if entries.len() % 2 != 0 {
        return Err(Error::Format("checkpoint does not pair weights with biases".into()));
    }
    let mut set = ParameterSet::new();
    for pair in entries.chunks(2) {
        let (wname, weight) = &pair[0];
        let (bname, bias) = &pair[1];
        let layer = wname
            .strip_suffix(".w")
            .ok_or_else(|| Error::Format(format!("expected weight entry, got `{wname}`")))?;
        if bname != &bias_key(layer) {
            return Err(Error::Format(format!("bias `{bname}` does not match layer `{layer}`")));
        }
        set.push(layer, LayerParams { weight: weight.clone(), bias: bias.clone() });
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ParameterSet {
        let mut set = ParameterSet::new();
        set.push(
            "fc0",
            LayerParams {
                weight: Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
                bias: Tensor::from_vec(vec![-1.0, 0.5]),
            },
        );
        set.push(
            "out",
            LayerParams {
                weight: Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
                bias: Tensor::from_vec(vec![0.0, 0.0]),
            },
        );
        set
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let set = sample_set();
        let mut bytes = Vec::new();
        save_checkpoint(&set.named_tensors(), &mut bytes).unwrap();
        let entries = load_checkpoint(&mut bytes.as_slice()).unwrap();
        let restored = parameter_set_from_entries(&entries).unwrap();
        assert_eq!(set, restored);

        let mut again = Vec::new();
        save_checkpoint(&restored.named_tensors(), &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_checkpoint_errors() {
        let set = sample_set();
        let mut bytes = Vec::new();
        save_checkpoint(&set.named_tensors(), &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(load_checkpoint(&mut bytes.as_slice()).is_err());
    }
}
