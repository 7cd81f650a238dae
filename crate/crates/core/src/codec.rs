//! Latent codecs: the space diffusion runs in.
//!
//! Both codecs are exact, parameter-free and differentiable, so the guidance
//! gradient can be pulled back through `decode` onto the latent.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentCodec {
    /// Diffuse directly in pixel space.
    #[default]
    Identity,
    /// Fold each `factor x factor` pixel block into channels.
    SpaceToDepth { factor: usize },
}

impl LatentCodec {
    /// Latent `[c, h, w]` for an image `[c, h, w]`.
    pub fn latent_shape(&self, image: [usize; 3]) -> Result<[usize; 3]> {
        match *self {
            Self::Identity => Ok(image),
            Self::SpaceToDepth { factor: f } => {
                let [c, h, w] = image;
                if f == 0 || h % f != 0 || w % f != 0 {
                    return Err(Error::Invalid(format!("space-to-depth factor {f} does not divide {h}x{w}")));
                }
                Ok([c * f * f, h / f, w / f])
            }
        }
    }

    /// Encode a batch `[n, c, h, w]`.
    pub fn encode<T: Real>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        match *self {
            Self::Identity => Ok(images.clone()),
            Self::SpaceToDepth { factor: f } => {
                let [n, c, h, w] = dims4(images.shape())?;
                self.latent_shape([c, h, w])?;
                images
                    .clone()
                    .reshape([n, c, h / f, f, w / f, f])?
                    .permute(&[0, 1, 3, 5, 2, 4])?
                    .reshape([n, c * f * f, h / f, w / f])
            }
        }
    }

    /// Decode a batch of latents back to images.
    pub fn decode<T: Real>(&self, latents: &Tensor<T>) -> Result<Tensor<T>> {
        match *self {
            Self::Identity => Ok(latents.clone()),
            Self::SpaceToDepth { factor: f } => {
                let [n, cf, hf, wf] = dims4(latents.shape())?;
                let c = cf / (f * f);
                latents
                    .clone()
                    .reshape([n, c, f, f, hf, wf])?
                    .permute(&[0, 1, 4, 2, 5, 3])?
                    .reshape([n, c, hf * f, wf * f])
            }
        }
    }

    /// Differentiable [`LatentCodec::decode`].
    pub fn decode_var<'g, T: Real>(&self, latents: Var<'g, T>) -> Result<Var<'g, T>> {
        match *self {
            Self::Identity => Ok(latents),
            Self::SpaceToDepth { factor: f } => {
                let [n, cf, hf, wf] = dims4(&latents.shape())?;
                let c = cf / (f * f);
                latents
                    .reshape([n, c, f, f, hf, wf])?
                    .permute(&[0, 1, 4, 2, 5, 3])?
                    .reshape([n, c, hf * f, wf * f])
            }
        }
    }
}

fn dims4(s: &[usize]) -> Result<[usize; 4]> {
    s.try_into().map_err(|_| Error::Shape(format!("expected [n, c, h, w], got {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;

    #[test]
    fn space_to_depth_round_trips_and_matches_graph_decode() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn([2, 3, 8, 8], &mut rng);
        let codec = LatentCodec::SpaceToDepth { factor: 2 };
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 12, 4, 4]);
        // pixel (c=1, y=3, x=5) lands in channel 1*4 + 1*2 + 1 at (1, 2)
        assert_eq!(z.data()[((12 + 7) * 4 + 1) * 4 + 2], x.data()[((3 + 1) * 8 + 3) * 8 + 5]);
        assert_eq!(codec.decode(&z).unwrap(), x);
        let g = Graph::inference();
        assert_eq!(codec.decode_var(g.constant(z)).unwrap().tensor(), x);
        assert!(codec.latent_shape([3, 7, 8]).is_err());
        assert_eq!(LatentCodec::Identity.encode(&x).unwrap(), x);
    }
}
