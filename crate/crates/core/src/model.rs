//! The full network: encoder → fusion → decoder → multi-scale head.

use crate::backbone::{Decoder, Encoder, FeaturePyramid, PyramidSpec};
use crate::error::{Error, Result};
use crate::fsad::{FsadTransformer, FusionMode, SamplingSpec};
use crate::heads::HeadVariant;
use crate::matchloss::{semantic_loss, total_loss, Assignment, GroundTruthSet, LossWeights};
use crate::msshead::{stage_labels, HeadOptions, MultiScaleHead, StagePrediction};
use crate::nn::{Bound, Builder, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub pyramid: PyramidSpec,
    pub fusion: FusionMode,
    pub sampling: SamplingSpec,
    pub head: HeadOptions,
    /// supervised decoder stages L
    pub stages: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        if self.fusion != FusionMode::Off {
            self.sampling.validate(self.pyramid.stages)?;
        }
        if self.stages == 0 || self.stages > self.pyramid.stages - 1 {
            return Err(Error::Config(format!("{} supervised stages with {} decoder stages", self.stages, self.pyramid.stages - 1)));
        }
        if self.head.classes == 0 {
            return Err(Error::Config("need at least one foreground class".into()));
        }
        if self.head.width % self.head.heads != 0 {
            return Err(Error::Config(format!("query width {} not divisible into {} heads", self.head.width, self.head.heads)));
        }
        Ok(())
    }

    /// Decoder widths of the supervised stages, coarsest first.
    pub fn head_channels(&self) -> Vec<usize> {
        let ch = self.pyramid.channels();
        (0..self.stages).rev().map(|s| ch[s]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub fusion: FsadTransformer,
    pub decoder: Decoder,
    pub head: MultiScaleHead,
}

pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub fused: FeaturePyramid,
    /// coarse→fine
    pub decoder_maps: Vec<Var>,
    /// coarse→fine; the last is the finest
    pub stages: Vec<StagePrediction>,
}

#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    pub ce: f64,
    pub assignment: Option<Assignment>,
}

impl Network {
    pub fn new<T: Scalar>(b: &mut Builder<T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let channels = config.pyramid.channels();
        Ok(Network {
            encoder: Encoder::new(b, &config.pyramid)?,
            fusion: FsadTransformer::new(b, config.fusion, &config.sampling, &channels)?,
            decoder: Decoder::new(b, &config.pyramid)?,
            head: MultiScaleHead::new(b, config.head.clone(), &config.head_channels())?,
            config: config.clone(),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, volume: Var) -> Result<ForwardOutput> {
        let pyramid = self.encoder.encode(g, p, volume)?;
        let fused = self.fusion.forward(g, p, &pyramid)?;
        let decoder_maps = self.decoder.decode(g, p, &fused, false)?;
        let first = decoder_maps.len() - self.config.stages;
        let stages = self.head.run(g, p, &decoder_maps[first..], None)?;
        Ok(ForwardOutput { pyramid, fused, decoder_maps, stages })
    }

    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, out: &ForwardOutput, labels: &[u16], extents: [usize; 3], w: &LossWeights) -> Result<LossParts> {
        let k = self.config.head.classes;
        if self.config.head.variant == HeadVariant::Decoupled {
            let gt = GroundTruthSet::from_labels(labels, extents, k)?;
            let l = total_loss(g, &out.stages, &gt, w)?;
            Ok(LossParts { total: l.total, class: l.class, bce: l.bce, dice: l.dice, ce: 0.0, assignment: Some(l.assignment) })
        } else {
            let (total, ce, dice) = semantic_loss(g, &out.stages, labels, extents, k)?;
            Ok(LossParts { total, class: 0.0, bce: 0.0, dice, ce, assignment: None })
        }
    }

    /// Voxel labels from the finest stage.
    pub fn labels<T: Scalar>(&self, g: &Graph<T>, out: &ForwardOutput) -> Result<Vec<u16>> {
        stage_labels(g, &out.stages.last().expect("at least one stage").output)
    }
}

/// A network with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = {
            let mut b = Builder::new(&mut params, &mut rng);
            Network::new(&mut b, config)?
        };
        Ok(Model { net, params })
    }

    /// Inference-only forward on a 1×C×D×H×W volume, returning finest-stage labels.
    pub fn predict(&self, volume: &Tensor<T>) -> Result<Vec<u16>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(volume.clone());
        let out = self.net.forward(&mut g, &p, x)?;
        self.net.labels(&g, &out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny_config(variant: HeadVariant) -> ModelConfig {
        let classes = 2;
        ModelConfig {
            pyramid: PyramidSpec { base_channels: 2, channel_cap: 8, ..PyramidSpec::default() },
            fusion: FusionMode::FullScale,
            sampling: SamplingSpec { points: 2, query_levels: 4, heads: 2, width: 8 },
            head: HeadOptions {
                variant,
                classes,
                queries: if variant.is_decoupled() { classes } else { classes + 1 },
                width: 8,
                heads: 2,
                shared_queries: true,
                masked_attention: true,
            },
            stages: 3,
        }
    }

    #[test]
    fn every_variant_trains_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vol = Tensor::<f64>::from_fn(&[1, 1, 16, 16, 16], |_| rng.gen_range(-1.0..1.0));
        let labels: Vec<u16> = (0..4096).map(|i| ((i / 300) % 3) as u16).collect();
        for v in HeadVariant::ALL {
            let mut m = Model::<f64>::new(&tiny_config(v), 2).unwrap();
            let mut g = Graph::new();
            let p = m.params.bind(&mut g, true);
            let x = g.constant(vol.clone());
            let out = m.net.forward(&mut g, &p, x).unwrap();
            assert_eq!(out.stages.len(), 3);
            let loss = m.net.loss(&mut g, &out, &labels, [16, 16, 16], &LossWeights::default()).unwrap();
            let l = g.value(loss.total).item();
            assert!(l.is_finite() && l > 0.0, "{v}: {l}");
            let grads = g.backward(loss.total).unwrap();
            m.params.accumulate_grads(&p, &grads, 1.0);
            let total: f64 = m.params.params().iter().map(|q| q.tensor.grad().unwrap().iter().map(|x| x * x).sum::<f64>()).sum();
            assert!(total > 0.0 && total.is_finite());
            assert_eq!(m.predict(&vol).unwrap().len(), 4096);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(HeadVariant::Decoupled);
        c.stages = 5;
        assert!(Model::<f32>::new(&c, 0).is_err());
        let mut c = tiny_config(HeadVariant::TransformerCls);
        c.head.queries = 2;
        assert!(Model::<f32>::new(&c, 0).is_err());
    }
}
