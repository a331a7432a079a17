//! Style statistics: per-channel spatial mean and population variance of
//! selected extractor layers, concatenated layer by layer.

use crate::diffcore::{input_var, run_extractor, Architecture, ModelParams, Tape, Tensor};
use crate::error::{Error, Result};

/// Where one tapped layer sits inside an [`SdfVector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapSlot {
    pub layer: usize,
    pub channels: usize,
    /// Means occupy `offset..offset+channels`, variances the next `channels`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdfVector {
    pub values: Vec<f64>,
    pub layout: Vec<TapSlot>,
}

impl SdfVector {
    pub fn means(&self, slot: usize) -> &[f64] {
        let s = self.layout[slot];
        &self.values[s.offset..s.offset + s.channels]
    }

    pub fn variances(&self, slot: usize) -> &[f64] {
        let s = self.layout[slot];
        &self.values[s.offset + s.channels..s.offset + 2 * s.channels]
    }
}

/// Mean and population variance of each channel of a channel-major map.
pub fn channel_moments(values: &[f64], channels: usize, extent: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(values.len(), channels * extent);
    let mut means = Vec::with_capacity(channels);
    let mut vars = Vec::with_capacity(channels);
    for plane in values.chunks(extent) {
        let mean = plane.iter().sum::<f64>() / extent as f64;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / extent as f64;
        means.push(mean);
        vars.push(var);
    }
    (means, vars)
}

/// Style statistics for every row of `x` (no gradients are recorded).
///
/// A flat layer output counts as one channel whose spatial positions are its
/// units; a tap must have more than one position.
pub fn compute_sdf(params: &ModelParams, arch: &Architecture, x: &Tensor, taps: &[usize]) -> Result<Vec<SdfVector>> {
    if taps.is_empty() {
        return Err(Error::Contract("at least one style tap is required".into()));
    }
    let shapes = arch.layer_shapes()?;
    let mut layout = Vec::with_capacity(taps.len());
    let mut offset = 0;
    for &layer in taps {
        let shape = shapes.get(layer).ok_or_else(|| {
            Error::Contract(format!("style tap {layer} but the extractor has {} layers", shapes.len()))
        })?;
        let (channels, extent) = shape.channels_and_extent();
        if extent < 2 {
            return Err(Error::Contract(format!(
                "style tap {layer} has no spatial extent ({shape:?})"
            )));
        }
        layout.push(TapSlot { layer, channels, offset });
        offset += 2 * channels;
    }

    let mut tape = Tape::new();
    let f = params.theta_f.bind_frozen(&mut tape);
    let input = input_var(&mut tape, arch, x)?;
    let trace = run_extractor(&mut tape, arch, &f, input)?;

    let n = x.rows();
    let mut out: Vec<SdfVector> = (0..n)
        .map(|_| SdfVector {
            values: Vec::with_capacity(offset),
            layout: layout.clone(),
        })
        .collect();
    for slot in &layout {
        let (channels, extent) = shapes[slot.layer].channels_and_extent();
        let act = tape.value(trace.layers[slot.layer]);
        for (i, sdf) in out.iter_mut().enumerate() {
            let (means, vars) = channel_moments(act.row(i), channels, extent);
            sdf.values.extend(means);
            sdf.values.extend(vars);
        }
    }
    Ok(out)
}
