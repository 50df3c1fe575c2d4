//! The full network: attention-fluid encoder plus progressive decoder,
//! with one parameter list whose construction order (and therefore seeded
//! initialization) is fixed by the configuration.

use ndarray::{Array2, Array3, Axis};

use crate::decoder::{DecodedVars, Decoder};
use crate::encoder::{BackboneConfig, EncodedVars, EncoderOutput, FluidEncoder, Toggles};
use crate::error::Result;
use crate::params::{ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{as3, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub toggles: Toggles,
    pub delta_init: f64,
    pub recalib_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            toggles: Toggles::default(),
            delta_init: 0.1,
            recalib_reduction: 16,
        }
    }
}

pub struct Dafnet {
    pub encoder: FluidEncoder,
    pub decoder: Decoder,
    config: ModelConfig,
}

/// Tape handles from a full forward pass.
pub struct ForwardVars {
    pub encoded: EncodedVars,
    pub decoded: DecodedVars,
}

/// Extracted arrays from a full forward pass.
pub struct ForwardOutputs<F> {
    /// Stage 1..3 masks at full, half and quarter resolution.
    pub masks: Vec<Array2<F>>,
    pub edges: Vec<Array2<F>>,
    pub attentions: Vec<Array2<F>>,
}

impl Dafnet {
    pub fn new(config: ModelConfig) -> Result<(Dafnet, Vec<ParamSpec>)> {
        config.backbone.validate()?;
        let mut specs = Vec::new();
        let encoder = FluidEncoder::new(
            config.backbone.clone(),
            config.toggles,
            config.delta_init,
            config.recalib_reduction,
            &mut specs,
        );
        let decoder = Decoder::new(encoder.enhanced_channels(), &mut specs);
        Ok((
            Dafnet {
                encoder,
                decoder,
                config,
            },
            specs,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward_vars<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        image: &Array3<F>,
    ) -> Result<ForwardVars> {
        let encoded = self.encoder.encode(tape, store, image)?;
        let decoded = self.decoder.decode(tape, store, &encoded.enhanced)?;
        Ok(ForwardVars { encoded, decoded })
    }

    /// Run a forward pass on a throwaway tape and extract plain arrays.
    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        image: &Array3<F>,
    ) -> Result<ForwardOutputs<F>> {
        let mut tape = Tape::new();
        let vars = self.forward_vars(&mut tape, store, image)?;
        let plane = |tape: &Tape<F>, v: Var| -> Array2<F> {
            as3(tape.value(v)).index_axis(Axis(0), 0).to_owned()
        };
        Ok(ForwardOutputs {
            masks: vars.decoded.masks.iter().map(|&v| plane(&tape, v)).collect(),
            edges: vars.decoded.edges.iter().map(|&v| plane(&tape, v)).collect(),
            attentions: vars
                .encoded
                .attentions
                .iter()
                .map(|&v| plane(&tape, v))
                .collect(),
        })
    }

    pub fn encode<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        image: &Array3<F>,
    ) -> Result<EncoderOutput<F>> {
        self.encoder.encode_arrays(store, image)
    }

    /// Final saliency prediction: the full-resolution stage-1 mask.
    pub fn predict<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        image: &Array3<F>,
    ) -> Result<Array2<F>> {
        let mut out = self.forward(store, image)?;
        Ok(out.masks.swap_remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(size: usize, toggles: Toggles) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                stage_channels: [4, 6, 6, 8, 8],
                stage_convs: [1, 1, 2, 2, 2],
                input_size: (size, size),
            },
            toggles,
            delta_init: 0.1,
            recalib_reduction: 16,
        }
    }

    fn image(h: usize, w: usize, seed: f64) -> Array3<f64> {
        Array3::from_shape_fn((3, h, w), |(c, i, j)| {
            ((c * h * w + i * w + j) as f64 * 0.31 + seed).sin() * 0.5 + 0.5
        })
    }

    #[test]
    fn forward_output_resolutions() {
        let (model, specs) = Dafnet::new(tiny_config(32, Toggles::default())).unwrap();
        let store = ParamStore::<f64>::init(specs, 7);
        let out = model.forward(&store, &image(32, 32, 0.0)).unwrap();
        assert_eq!(out.masks[0].dim(), (32, 32));
        assert_eq!(out.masks[1].dim(), (16, 16));
        assert_eq!(out.masks[2].dim(), (8, 8));
        assert_eq!(out.edges.len(), 3);
        assert_eq!(out.attentions.len(), 5);
        for m in out.masks.iter().chain(out.edges.iter()) {
            assert!(m.iter().all(|&v| v > 0.0 && v < 1.0 && v.is_finite()));
        }
    }

    #[test]
    fn forward_is_deterministic_for_fixed_store() {
        let (model, specs) = Dafnet::new(tiny_config(32, Toggles::default())).unwrap();
        let store = ParamStore::<f64>::init(specs, 3);
        let img = image(32, 32, 1.0);
        let a = model.forward(&store, &img).unwrap();
        let b = model.forward(&store, &img).unwrap();
        for (x, y) in a.masks.iter().zip(&b.masks) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn all_ablation_variants_run() {
        for (gfa, cpa, daf) in [
            (false, false, false),
            (true, false, false),
            (true, true, false),
            (true, true, true),
        ] {
            let toggles = Toggles {
                use_gfa: gfa,
                use_cpa: cpa,
                use_daf: daf,
            };
            let (model, specs) = Dafnet::new(tiny_config(16, toggles)).unwrap();
            let store = ParamStore::<f64>::init(specs, 1);
            let out = model.forward(&store, &image(16, 16, 2.0)).unwrap();
            assert_eq!(out.masks[0].dim(), (16, 16));
        }
    }

    #[test]
    fn gradients_flow_to_every_parameter_kind() {
        // a loss summing every decoder output should reach representative
        // parameters of each component
        let (model, specs) = Dafnet::new(tiny_config(16, Toggles::default())).unwrap();
        let store = ParamStore::<f64>::init(specs, 5);
        let mut tape = Tape::<f64>::new();
        let vars = model
            .forward_vars(&mut tape, &store, &image(16, 16, 3.0))
            .unwrap();
        let mut total = None;
        for &m in vars.decoded.masks.iter().chain(vars.decoded.edges.iter()) {
            let s = tape.sum_all(m);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s),
            });
        }
        let grads = tape.backward(total.unwrap());
        let per_param = tape.param_grads(&grads);
        let mut nonzero_by_name: std::collections::HashMap<&str, f64> = Default::default();
        for (idx, g) in &per_param {
            let name = store.name(*idx);
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            *nonzero_by_name.entry(name).or_default() += norm;
        }
        for probe in [
            "backbone.stage1.conv0.weight",
            "gca.1.delta",
            "gca.2.recalib.fc1.weight",
            "gca.3.att0.weight",
            "gca.4.squeeze1.weight",
            "daf.5.conv.weight",
            "decoder.ff4.weight",
            "decoder.cb1.conv2.weight",
            "decoder.head1.mask.weight",
            "decoder.head3.edge.bias",
        ] {
            let norm = nonzero_by_name.get(probe).copied().unwrap_or(0.0);
            assert!(norm > 0.0, "no gradient reached {probe}");
        }
    }
}
