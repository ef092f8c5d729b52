//! Turning a support (image, mask) pair into what the network consumes.

use crate::codec::{mask_rgb, BinaryMask, Codec, ImageTensor, LatentTensor};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{Injection, Interaction, MultiplicationDomain, UNetConfig};

/// Which side of the dual-branch network a latent feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Support,
}

/// A `2c`-channel latent ready for the shared UNet.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchInput {
    pub latent: LatentTensor,
    pub role: Role,
}

impl BranchInput {
    pub fn new(latent: LatentTensor, role: Role, c: usize) -> Result<Self> {
        if latent.c != 2 * c {
            return Err(Error::ShapeMismatch(format!(
                "branch input has {} channels, expected {}",
                latent.c,
                2 * c
            )));
        }
        Ok(Self { latent, role })
    }
}

/// Support information in the form the configured interaction expects.
#[derive(Debug, Clone, PartialEq)]
pub enum PreparedSupport {
    /// A full UNet branch whose self-attention keys/values the query can read.
    /// `gate` restricts which of its tokens are visible (attention-mask injection).
    Branch { input: BranchInput, gate: Option<BinaryMask> },
    /// Patchified image (one row per patch) for the toy token encoder, with an
    /// optional per-token gate. Concatenation injection places the mask
    /// patches next to the image patches along the columns.
    Tokens { patches: Matrix, gate: Option<Vec<bool>> },
}

/// Splits an image into non-overlapping `p×p` patches, one row per patch.
pub fn patchify(image: &ImageTensor, p: usize) -> Result<Matrix> {
    if image.h % p != 0 || image.w % p != 0 {
        return Err(Error::NotDivisible { dim: image.h.max(image.w), factor: p });
    }
    let (ph, pw) = (image.h / p, image.w / p);
    let mut data = Vec::with_capacity(image.data.len());
    for i in 0..ph {
        for j in 0..pw {
            for dy in 0..p {
                let row = (i * p + dy) * image.w + j * p;
                data.extend_from_slice(&image.data[row * 3..(row + p) * 3]);
            }
        }
    }
    Ok(Matrix::from_vec(ph * pw, p * p * 3, data))
}

fn hstack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(a.len() + b.len());
    for r in 0..a.rows {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Matrix::from_vec(a.rows, a.cols + b.cols, data)
}

fn multiply(image: &ImageTensor, mask: &BinaryMask) -> ImageTensor {
    let data = image
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.data[i / 3] { v } else { 0.0 })
        .collect();
    ImageTensor::new(image.h, image.w, data)
}

fn overlay(image: &ImageTensor, mask: &BinaryMask) -> ImageTensor {
    let data = image
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| 0.5 * v + if mask.data[i / 3] { 0.5 } else { 0.0 })
        .collect();
    ImageTensor::new(image.h, image.w, data)
}

/// Zeroes every latent site whose nearest mask pixel is background.
fn multiply_latent(z: &LatentTensor, mask: &BinaryMask) -> LatentTensor {
    let small = mask.resize_nearest(z.h, z.w);
    let data = z
        .data
        .chunks_exact(z.c)
        .zip(&small.data)
        .flat_map(|(site, &keep)| site.iter().map(move |&v| if keep { v } else { 0.0 }))
        .collect();
    LatentTensor::from_vec(z.h, z.w, z.c, data)
}

fn duplicated(z: LatentTensor) -> Result<LatentTensor> {
    z.concat_channels(&z)
}

pub fn prepare_support(
    codec: &Codec,
    image: &ImageTensor,
    mask: &BinaryMask,
    cfg: &UNetConfig,
) -> Result<PreparedSupport> {
    if (image.h, image.w) != (mask.h, mask.w) {
        return Err(Error::ShapeMismatch("support image vs mask".into()));
    }
    let c = codec.latent_channels();
    match cfg.interaction {
        Interaction::Fsa => {
            let (latent, gate) = match cfg.injection {
                Injection::Concatenation => {
                    (codec.encode(image)?.concat_channels(&codec.encode(&mask_rgb(mask))?)?, None)
                }
                Injection::Multiplication => {
                    let z = match cfg.multiplication_domain {
                        MultiplicationDomain::Rgb => codec.encode(&multiply(image, mask))?,
                        MultiplicationDomain::Latent => multiply_latent(&codec.encode(image)?, mask),
                    };
                    (duplicated(z)?, None)
                }
                Injection::AttentionMask => (duplicated(codec.encode(image)?)?, Some(mask.clone())),
                Injection::Addition => (duplicated(codec.encode(&overlay(image, mask))?)?, None),
            };
            Ok(PreparedSupport::Branch { input: BranchInput::new(latent, Role::Support, c)?, gate })
        }
        Interaction::Tca => {
            let p = cfg.patch;
            let patch_gate = || {
                let small = mask.resize_nearest(image.h / p, image.w / p);
                small.data
            };
            let (patches, gate) = match cfg.injection {
                Injection::Concatenation => {
                    (hstack(&patchify(image, p)?, &patchify(&mask_rgb(mask), p)?), None)
                }
                Injection::Multiplication => match cfg.multiplication_domain {
                    MultiplicationDomain::Rgb => (patchify(&multiply(image, mask), p)?, None),
                    MultiplicationDomain::Latent => {
                        let mut m = patchify(image, p)?;
                        for (r, keep) in patch_gate().into_iter().enumerate() {
                            if !keep {
                                m.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                            }
                        }
                        (m, None)
                    }
                },
                Injection::AttentionMask => (patchify(image, p)?, Some(patch_gate())),
                Injection::Addition => (patchify(&overlay(image, mask), p)?, None),
            };
            Ok(PreparedSupport::Tokens { patches, gate })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(interaction: Interaction, injection: Injection) -> UNetConfig {
        UNetConfig { interaction, injection, ..UNetConfig::toy(8) }
    }

    #[test]
    fn full_mask_multiplication_is_plain_image() {
        let codec = Codec::new(4);
        let img = ImageTensor::new(8, 8, (0..192).map(|i| (i % 17) as f64 / 16.0).collect());
        let full = BinaryMask::filled(8, 8, true);
        let PreparedSupport::Branch { input, gate } =
            prepare_support(&codec, &img, &full, &cfg(Interaction::Fsa, Injection::Multiplication)).unwrap()
        else {
            panic!("expected a branch")
        };
        assert!(gate.is_none());
        let z = codec.encode(&img).unwrap();
        assert_eq!(input.latent.channel_slice(0, 48), z);
        assert_eq!(input.latent.channel_slice(48, 48), z);
    }

    #[test]
    fn addition_of_constant_image() {
        let codec = Codec::new(4);
        let img = ImageTensor::filled(8, 8, 0.4);
        let full = BinaryMask::filled(8, 8, true);
        let PreparedSupport::Branch { input, .. } =
            prepare_support(&codec, &img, &full, &cfg(Interaction::Fsa, Injection::Addition)).unwrap()
        else {
            panic!("expected a branch")
        };
        assert!(input.latent.data.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn concatenation_stacks_image_and_mask() {
        let codec = Codec::new(4);
        let img = ImageTensor::filled(8, 8, 0.3);
        let mut m = BinaryMask::filled(8, 8, false);
        m.data[0] = true;
        let PreparedSupport::Branch { input, .. } =
            prepare_support(&codec, &img, &m, &cfg(Interaction::Fsa, Injection::Concatenation)).unwrap()
        else {
            panic!("expected a branch")
        };
        assert_eq!(input.latent.channel_slice(48, 48), codec.encode(&mask_rgb(&m)).unwrap());
    }

    #[test]
    fn latent_multiplication_zeroes_background_sites() {
        let codec = Codec::new(4);
        let img = ImageTensor::filled(8, 8, 0.5);
        let mut m = BinaryMask::filled(8, 8, false);
        for y in 0..4 {
            for x in 0..4 {
                m.data[y * 8 + x] = true;
            }
        }
        let mut c = cfg(Interaction::Fsa, Injection::Multiplication);
        c.multiplication_domain = MultiplicationDomain::Latent;
        let PreparedSupport::Branch { input, .. } = prepare_support(&codec, &img, &m, &c).unwrap() else {
            panic!("expected a branch")
        };
        let first: Vec<f64> = input.latent.data[..96].to_vec();
        assert!(first.iter().all(|&v| v == 0.5));
        assert!(input.latent.data[96..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_injection_variants() {
        let codec = Codec::new(4);
        let img = ImageTensor::filled(16, 16, 0.2);
        let mut m = BinaryMask::filled(16, 16, false);
        m.data[0] = true;
        let concat = prepare_support(&codec, &img, &m, &cfg(Interaction::Tca, Injection::Concatenation)).unwrap();
        let PreparedSupport::Tokens { patches, gate } = concat else { panic!() };
        assert_eq!(patches.shape(), (4, 384));
        assert!(gate.is_none());
        let am = prepare_support(&codec, &img, &m, &cfg(Interaction::Tca, Injection::AttentionMask)).unwrap();
        let PreparedSupport::Tokens { gate, .. } = am else { panic!() };
        // one foreground pixel in the corner is not the centre of its patch
        assert_eq!(gate, Some(vec![false; 4]));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let codec = Codec::new(4);
        let r = prepare_support(
            &codec,
            &ImageTensor::filled(8, 8, 0.2),
            &BinaryMask::filled(4, 8, true),
            &UNetConfig::toy(8),
        );
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }
}
