//! UNet-style encoder/decoder producing the feature pyramid and decoder maps.

use crate::error::{dim_err, Error, Result};
use crate::nn::{Bound, Builder, Conv, ConvBlock, ParamGroup};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidSpec {
    pub stages: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub multiplier: usize,
    pub channel_cap: usize,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec { stages: 5, in_channels: 1, base_channels: 16, multiplier: 2, channel_cap: 320 }
    }
}

impl PyramidSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 4 {
            return Err(Error::Spec(format!("need at least 4 stages, got {}", self.stages)));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.multiplier == 0 || self.channel_cap == 0 {
            return Err(Error::Spec("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<usize> {
        let mut c = self.base_channels;
        (0..self.stages)
            .map(|_| {
                let out = c.min(self.channel_cap);
                c = c.saturating_mul(self.multiplier);
                out
            })
            .collect()
    }

    /// Spatial extents of every stage, finest first.
    pub fn extents(&self, input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let f = 1usize << (self.stages - 1);
        if input.iter().any(|&e| e == 0 || e % f != 0) {
            return Err(dim_err!("input extents {input:?} not divisible by {f} for {} stages", self.stages));
        }
        Ok((0..self.stages).map(|s| input.map(|e| e >> s)).collect())
    }
}

/// Encoder output, stage 1 (finest) first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: PyramidSpec,
    pub stages: Vec<[ConvBlock; 2]>,
}

impl Encoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, spec: &PyramidSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = b.scope("encoder").group(ParamGroup::Cnn);
        let ch = spec.channels();
        let mut cin = spec.in_channels;
        let stages = ch
            .iter()
            .enumerate()
            .map(|(s, &c)| {
                let mut sb = b.scope(&format!("stage{}", s + 1));
                let stride = if s == 0 { 1 } else { 2 };
                let blocks = [ConvBlock::new(&mut sb, "block1", cin, c, stride), ConvBlock::new(&mut sb, "block2", c, c, 1)];
                cin = c;
                blocks
            })
            .collect();
        Ok(Encoder { spec: spec.clone(), stages })
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, volume: Var) -> Result<FeaturePyramid> {
        let (_, c, sp) = g.value(volume).dims5()?;
        if c != self.spec.in_channels {
            return Err(dim_err!("volume has {c} channels, encoder expects {}", self.spec.in_channels));
        }
        self.spec.extents(sp)?;
        let mut x = volume;
        let mut levels = Vec::with_capacity(self.stages.len());
        for [b1, b2] in &self.stages {
            x = b1.forward(g, p, x)?;
            x = b2.forward(g, p, x)?;
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    /// 1×1 conv taking the coarser map to this stage's width before upsampling
    pub reduce: Conv,
    pub blocks: [ConvBlock; 2],
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub spec: PyramidSpec,
    /// index s decodes into encoder stage s+1; stage S has no decoder
    pub stages: Vec<DecoderStage>,
}

impl Decoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, spec: &PyramidSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = b.scope("decoder").group(ParamGroup::Cnn);
        let ch = spec.channels();
        let stages = (0..spec.stages - 1)
            .map(|s| {
                let mut sb = b.scope(&format!("stage{}", s + 1));
                let c = ch[s];
                DecoderStage {
                    reduce: Conv::new(&mut sb, "reduce", ch[s + 1], c, 1, 1),
                    blocks: [ConvBlock::new(&mut sb, "block1", 2 * c, c, 1), ConvBlock::new(&mut sb, "block2", c, c, 1)],
                }
            })
            .collect();
        Ok(Decoder { spec: spec.clone(), stages })
    }

    /// Decoder outputs coarse→fine; the last has the input resolution.
    /// `zero_skips` replaces every skip with zeros so only the bottleneck matters.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, fused: &FeaturePyramid, zero_skips: bool) -> Result<Vec<Var>> {
        let n = self.spec.stages;
        if fused.levels.len() != n {
            return Err(dim_err!("pyramid has {} levels, decoder expects {n}", fused.levels.len()));
        }
        let ch = self.spec.channels();
        for (s, &v) in fused.levels.iter().enumerate() {
            let (_, c, _) = g.value(v).dims5()?;
            if c != ch[s] {
                return Err(dim_err!("pyramid level {} has {c} channels, expected {}", s + 1, ch[s]));
            }
        }
        let mut x = fused.levels[n - 1];
        let mut outs = Vec::with_capacity(n - 1);
        for s in (0..n - 1).rev() {
            let stage = &self.stages[s];
            // a pointwise conv commutes with nearest upsampling, so reduce first
            let r = stage.reduce.forward(g, p, x)?;
            let up = g.upsample2(r)?;
            let skip = fused.levels[s];
            if g.shape(up) != g.shape(skip) {
                return Err(dim_err!("upsampled {:?} does not match skip {:?}", g.shape(up), g.shape(skip)));
            }
            let skip = if zero_skips { g.constant(Tensor::zeros(g.shape(skip))) } else { skip };
            let cat = g.concat(&[up, skip], 1)?;
            x = stage.blocks[0].forward(g, p, cat)?;
            x = stage.blocks[1].forward(g, p, x)?;
            outs.push(x);
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(spec: &PyramidSpec, seed: u64) -> (ParamStore<f64>, Encoder, Decoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let enc = Encoder::new(&mut b, spec).unwrap();
        let dec = Decoder::new(&mut b, spec).unwrap();
        (store, enc, dec)
    }

    fn random_volume(ext: [usize; 3], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 1, ext[0], ext[1], ext[2]], |_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
    }

    #[test]
    fn extents_and_channels() {
        let spec = PyramidSpec::default();
        assert_eq!(spec.channels(), vec![16, 32, 64, 128, 256]);
        let ext = spec.extents([32, 32, 32]).unwrap();
        assert_eq!(ext, vec![[32; 3], [16; 3], [8; 3], [4; 3], [2; 3]]);
        assert!(spec.extents([24, 32, 32]).is_err());
        let capped = PyramidSpec { channel_cap: 64, ..PyramidSpec::default() };
        assert_eq!(capped.channels(), vec![16, 32, 64, 64, 64]);
        assert!(PyramidSpec { stages: 3, ..PyramidSpec::default() }.validate().is_err());
    }

    #[test]
    fn encode_decode_shapes() {
        let spec = PyramidSpec { base_channels: 4, ..PyramidSpec::default() };
        let (store, enc, dec) = build(&spec, 1);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(random_volume([32, 32, 32], 2));
        let pyr = enc.encode(&mut g, &p, x).unwrap();
        let ch = spec.channels();
        for (s, &v) in pyr.levels.iter().enumerate() {
            let e = 32 >> s;
            assert_eq!(g.shape(v), &[1, ch[s], e, e, e]);
        }
        let outs = dec.decode(&mut g, &p, &pyr, false).unwrap();
        let ext: Vec<usize> = outs.iter().map(|&v| g.shape(v)[2]).collect();
        assert_eq!(ext, vec![4, 8, 16, 32]);
        assert!(outs.iter().all(|&v| g.value(v).is_finite()));
    }

    #[test]
    fn indivisible_input_rejected() {
        let spec = PyramidSpec { base_channels: 2, ..PyramidSpec::default() };
        let (store, enc, _) = build(&spec, 1);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 1, 16, 16, 12]));
        assert!(matches!(enc.encode(&mut g, &p, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_input_reproducible() {
        let spec = PyramidSpec { base_channels: 2, ..PyramidSpec::default() };
        let run = || {
            let (store, enc, _) = build(&spec, 9);
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let x = g.constant(Tensor::zeros(&[1, 1, 16, 16, 16]));
            let pyr = enc.encode(&mut g, &p, x).unwrap();
            pyr.levels.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn zeroed_skips_ignore_skip_perturbation() {
        let spec = PyramidSpec { base_channels: 2, ..PyramidSpec::default() };
        let (store, enc, dec) = build(&spec, 3);
        let run = |perturb: bool| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let x = g.constant(random_volume([16, 16, 16], 4));
            let mut pyr = enc.encode(&mut g, &p, x).unwrap();
            if perturb {
                let noise = g.constant(random_volume([16, 16, 16], 5).map(|v| v * 3.0));
                let noise = g.reshape(noise, &[1, 1, 16, 16, 16]).unwrap();
                let shape = g.shape(pyr.levels[0]).to_vec();
                let rep = g.concat(&vec![noise; shape[1]], 1).unwrap();
                pyr.levels[0] = g.add(pyr.levels[0], rep).unwrap();
            }
            let outs = dec.decode(&mut g, &p, &pyr, true).unwrap();
            g.value(*outs.last().unwrap()).clone()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn doubling_width_keeps_extents() {
        for base in [2, 4] {
            let spec = PyramidSpec { base_channels: base, ..PyramidSpec::default() };
            let (store, enc, dec) = build(&spec, 1);
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let x = g.constant(random_volume([16, 16, 32], 2));
            let pyr = enc.encode(&mut g, &p, x).unwrap();
            let outs = dec.decode(&mut g, &p, &pyr, false).unwrap();
            let ext: Vec<Vec<usize>> = outs.iter().map(|&v| g.shape(v)[2..].to_vec()).collect();
            assert_eq!(ext, vec![vec![2, 2, 4], vec![4, 4, 8], vec![8, 8, 16], vec![16, 16, 32]]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn round_trip_shape_contract(d in 1usize..3, h in 1usize..3, w in 1usize..3, stages in 4usize..6) {
            let spec = PyramidSpec { stages, base_channels: 2, ..PyramidSpec::default() };
            let f = 1usize << (stages - 1);
            let ext = [d * f, h * f, w * f];
            let (store, enc, dec) = build(&spec, 7);
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let x = g.constant(random_volume(ext, 8));
            let pyr = enc.encode(&mut g, &p, x).unwrap();
            let outs = dec.decode(&mut g, &p, &pyr, false).unwrap();
            prop_assert_eq!(outs.len(), stages - 1);
            let last = *outs.last().unwrap();
            prop_assert_eq!(&g.shape(last)[2..], &ext[..]);
            prop_assert_eq!(g.shape(last)[1], 2);
        }
    }
}
