//! The full set of learnable parameters: two encoders, the decoder and,
//! in ordinal mode, the spacing prior.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::generative::{BoundDecoder, DecoderNet};
use crate::inference::{BoundEncoder, EncoderNet};
use crate::nn::BoundMlp;
use crate::prior::{iid_prior_moments, BoundSpacing, ChainGaussian, PriorMode, SpacingParams};

pub const ENCODER_HIDDEN: [usize; 2] = [256, 128];
pub const DECODER_HIDDEN: [usize; 2] = [128, 256];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    pub k: usize,
    pub prior_mode: PriorMode,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn new(data_dim: usize, content_dim: usize, style_dim: usize, k: usize, prior_mode: PriorMode) -> Self {
        ModelConfig {
            data_dim,
            content_dim,
            style_dim,
            k,
            prior_mode,
            encoder_hidden: ENCODER_HIDDEN.to_vec(),
            decoder_hidden: DECODER_HIDDEN.to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.data_dim, self.content_dim, self.style_dim, self.k].contains(&0) {
            return Err(Error::Contract(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub content_encoder: EncoderNet,
    pub style_encoder: EncoderNet,
    pub decoder: DecoderNet,
    /// `None` for the iid ablation, whose prior has no parameters.
    pub prior: Option<SpacingParams>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let content_encoder = EncoderNet::new(c.data_dim, &c.encoder_hidden, c.content_dim, rng)?;
        let style_encoder = EncoderNet::new(c.data_dim, &c.encoder_hidden, c.style_dim, rng)?;
        let decoder = DecoderNet::new(c.content_dim, c.style_dim, &c.decoder_hidden, c.data_dim, rng)?;
        let prior = match c.prior_mode {
            PriorMode::Ordinal => Some(SpacingParams::init(c.content_dim, c.k)?),
            PriorMode::Iid => None,
        };
        Ok(Model {
            config,
            content_encoder,
            style_encoder,
            decoder,
            prior,
        })
    }

    /// All-zero networks; the prior keeps its default initialization.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        Ok(Model {
            content_encoder: EncoderNet::zeros(c.data_dim, &c.encoder_hidden, c.content_dim)?,
            style_encoder: EncoderNet::zeros(c.data_dim, &c.encoder_hidden, c.style_dim)?,
            decoder: DecoderNet::zeros(c.content_dim, c.style_dim, &c.decoder_hidden, c.data_dim)?,
            prior: match c.prior_mode {
                PriorMode::Ordinal => Some(SpacingParams::init(c.content_dim, c.k)?),
                PriorMode::Iid => None,
            },
            config,
        })
    }

    /// Parameter catalog in a fixed order shared by [`Model::tensors_mut`]
    /// and [`BoundModel::leaves`].
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, net) in [
            ("content_encoder", &self.content_encoder.net),
            ("style_encoder", &self.style_encoder.net),
            ("decoder", &self.decoder.net),
        ] {
            out.extend(net.named().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        if let Some(p) = &self.prior {
            out.push(("prior.mu1".into(), &p.mu1));
            if let Some(t) = &p.delta_bar {
                out.push(("prior.delta_bar".into(), t));
            }
            if let Some(t) = &p.sigma_bar {
                out.push(("prior.sigma_bar".into(), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.content_encoder.net.tensors_mut());
        out.extend(self.style_encoder.net.tensors_mut());
        out.extend(self.decoder.net.tensors_mut());
        if let Some(p) = &mut self.prior {
            out.push(&mut p.mu1);
            out.extend(p.delta_bar.as_mut());
            out.extend(p.sigma_bar.as_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Joint prior over the content latents of all `K` levels.
    pub fn prior_moments(&self) -> Result<ChainGaussian> {
        match &self.prior {
            Some(p) => Ok(p.joint_moments()),
            None => iid_prior_moments(self.config.content_dim, self.config.k),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        let leaves: Vec<Var<'t>> = self
            .named()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        self.bind_leaves(&leaves).expect("catalog matches its own leaves")
    }

    /// Assemble a bound model from caller-provided leaves in catalog order.
    pub fn bind_leaves<'t>(&self, leaves: &[Var<'t>]) -> Result<BoundModel<'t>> {
        let named = self.named();
        if leaves.len() != named.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter leaves, got {}",
                named.len(),
                leaves.len()
            )));
        }
        for ((name, t), leaf) in named.iter().zip(leaves) {
            if leaf.shape() != t.shape() {
                return Err(Error::Contract(format!(
                    "leaf for {name} has shape {:?}, expected {:?}",
                    leaf.shape(),
                    t.shape()
                )));
            }
        }
        let mut rest = leaves.iter().copied();
        let mut mlp = |layers: usize| BoundMlp {
            layers: (0..layers)
                .map(|_| (rest.next().expect("counted"), rest.next().expect("counted")))
                .collect(),
        };
        let content_encoder = BoundEncoder {
            net: mlp(self.content_encoder.net.layers.len()),
            latent: self.config.content_dim,
        };
        let style_encoder = BoundEncoder {
            net: mlp(self.style_encoder.net.layers.len()),
            latent: self.config.style_dim,
        };
        let decoder = BoundDecoder {
            net: mlp(self.decoder.net.layers.len()),
        };
        let prior = self.prior.as_ref().map(|p| {
            let mu1 = rest.next().expect("counted");
            let links = p.delta_bar.is_some();
            BoundSpacing {
                d: p.d,
                k: p.k,
                mu1,
                delta_bar: links.then(|| rest.next().expect("counted")),
                sigma_bar: links.then(|| rest.next().expect("counted")),
            }
        });
        Ok(BoundModel {
            content_encoder,
            style_encoder,
            decoder,
            prior,
            content_dim: self.config.content_dim,
            k: self.config.k,
        })
    }
}

pub struct BoundModel<'t> {
    pub content_encoder: BoundEncoder<'t>,
    pub style_encoder: BoundEncoder<'t>,
    pub decoder: BoundDecoder<'t>,
    pub prior: Option<BoundSpacing<'t>>,
    pub content_dim: usize,
    pub k: usize,
}

impl<'t> BoundModel<'t> {
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut out: Vec<Var<'t>> = Vec::new();
        out.extend(self.content_encoder.net.leaves());
        out.extend(self.style_encoder.net.leaves());
        out.extend(self.decoder.net.leaves());
        if let Some(p) = &self.prior {
            out.extend(p.leaves());
        }
        out
    }

    /// Prior means `[d_c, K]` and covariances `[d_c, K, K]` on the tape.
    pub fn prior_moments(&self, tape: &'t Tape) -> Result<(Var<'t>, Var<'t>)> {
        match &self.prior {
            Some(p) => p.moments(),
            None => {
                let (d, k) = (self.content_dim, self.k);
                let mut eye = vec![0.0; d * k * k];
                for l in 0..d {
                    for i in 0..k {
                        eye[l * k * k + i * k + i] = 1.0;
                    }
                }
                Ok((
                    tape.constant(Tensor::zeros(&[d, k])),
                    tape.constant(Tensor::new(vec![d, k, k], eye)?),
                ))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(mode: PriorMode) -> ModelConfig {
        let mut c = ModelConfig::new(16, 2, 3, 4, mode);
        c.encoder_hidden = vec![8];
        c.decoder_hidden = vec![8];
        c
    }

    #[test]
    fn catalog_orders_agree() {
        let mut model = Model::new(small(PriorMode::Ordinal), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "content_encoder.0.weight");
        assert_eq!(names.last().unwrap(), "prior.sigma_bar");
        let shapes: Vec<Vec<usize>> = model.named().iter().map(|(_, t)| t.shape().to_vec()).collect();

        let tape = Tape::new();
        let leaves = model.bind(&tape).leaves();
        assert_eq!(leaves.len(), names.len());
        for (leaf, shape) in leaves.iter().zip(&shapes) {
            assert_eq!(&leaf.shape(), shape);
        }
        let mut_shapes: Vec<Vec<usize>> = model.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(mut_shapes, shapes);
    }

    #[test]
    fn iid_mode_has_no_prior_parameters() {
        let model = Model::new(small(PriorMode::Iid), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(model.named().iter().all(|(n, _)| !n.starts_with("prior")));
        let tape = Tape::new();
        let (a, c) = model.bind(&tape).prior_moments(&tape).unwrap();
        let joint = model.prior_moments().unwrap();
        assert_eq!(a.value().data(), joint.means.as_slice());
        for l in 0..2 {
            assert_eq!(&c.value().data()[l * 16..(l + 1) * 16], joint.covs[l].entries());
        }
    }

    #[test]
    fn zero_dimension_rejected() {
        let mut c = small(PriorMode::Iid);
        c.k = 0;
        assert!(Model::zeros(c).is_err());
    }
}
