use crate::array::Array;
use crate::error::{Error, Result};

/// Zero-padded `B x T_max x D` batch with per-sample validity masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub data: Array,
    pub masks: Vec<Vec<bool>>,
}

impl PaddedBatch {
    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn max_len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// The `T_max x D` slab of sample `b`.
    pub fn sample(&self, b: usize) -> Array {
        let (t, d) = (self.max_len(), self.width());
        Array::new(
            vec![t, d],
            self.data.data()[b * t * d..(b + 1) * t * d].to_vec(),
        )
        .unwrap()
    }
}

/// Pads the sequences to the longest length in this batch only, with zeros
/// at the tail.
pub fn pad_batch<'a>(sequences: impl IntoIterator<Item = &'a Array>) -> Result<PaddedBatch> {
    let seqs: Vec<&Array> = sequences.into_iter().collect();
    let Some(first) = seqs.first() else {
        return Err(Error::invalid("pad_batch: empty batch"));
    };
    let (_, width) = first
        .dims2()
        .ok_or_else(|| Error::shape("pad_batch", "sequences must be T x D"))?;
    let mut t_max = 0;
    for s in &seqs {
        match s.dims2() {
            Some((t, d)) if d == width && t > 0 => t_max = t_max.max(t),
            _ => {
                return Err(Error::shape(
                    "pad_batch",
                    format!("sequence {:?} in a batch of width {width}", s.shape()),
                ))
            }
        }
    }
    let mut data = Vec::with_capacity(seqs.len() * t_max * width);
    let mut masks = Vec::with_capacity(seqs.len());
    for s in &seqs {
        let t = s.shape()[0];
        data.extend_from_slice(s.data());
        data.resize(data.len() + (t_max - t) * width, 0.0);
        masks.push((0..t_max).map(|i| i < t).collect());
    }
    Ok(PaddedBatch {
        data: Array::new(vec![seqs.len(), t_max, width], data)?,
        masks,
    })
}
