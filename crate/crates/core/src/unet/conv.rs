//! 3×3 convolutions on token grids, expressed as gather + matmul.
//!
//! Kernels are stored as `(9·cin)×cout` matrices whose rows are ordered
//! `(ky, kx, cin)`.

use crate::autodiff::{Graph, Var, ZERO};
use crate::codec::LatentTensor;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// im2col for a zero-padded 3×3 window with the given stride.
fn im2col_index(h: usize, w: usize, cin: usize, stride: usize) -> (usize, usize, Vec<usize>) {
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut index = Vec::with_capacity(ho * wo * 9 * cin);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..3 {
                for kx in 0..3 {
                    let y = (oy * stride + ky) as isize - 1;
                    let x = (ox * stride + kx) as isize - 1;
                    let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                    for c in 0..cin {
                        index.push(if inside {
                            ((y as usize) * w + x as usize) * cin + c
                        } else {
                            ZERO
                        });
                    }
                }
            }
        }
    }
    (ho, wo, index)
}

/// Convolves the `h×w` token grid `x` with `kernel`; returns the output grid.
pub fn conv3x3(
    g: &mut Graph,
    x: Var,
    (h, w): (usize, usize),
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
) -> (Var, (usize, usize)) {
    let cin = g.shape(x).1;
    assert_eq!(g.shape(kernel).0, 9 * cin, "kernel rows");
    let (ho, wo, index) = im2col_index(h, w, cin, stride);
    let cols = g.gather(x, ho * wo, 9 * cin, index);
    let mut out = g.matmul(cols, kernel);
    if let Some(b) = bias {
        out = g.add_row(out, b);
    }
    (out, (ho, wo))
}

/// Nearest-neighbour ×2 upsampling of an `h×w` grid.
pub fn upsample2(g: &mut Graph, x: Var, (h, w): (usize, usize)) -> (Var, (usize, usize)) {
    let c = g.shape(x).1;
    let (h2, w2) = (2 * h, 2 * w);
    let index = (0..h2)
        .flat_map(|y| (0..w2).flat_map(move |xx| (0..c).map(move |ch| ((y / 2) * w + xx / 2) * c + ch)))
        .collect();
    (g.gather(x, h2 * w2, c, index), (h2, w2))
}

/// Convolution whose input is a channel-stack of `slots` equal-width parts,
/// with the kernel stored as `slots` stacked `(9·c)×cout` blocks.
///
/// Each slot is convolved separately and the partial responses are summed,
/// so a kernel built by [`adapt_input_layer`] reproduces the original
/// layer bit-for-bit on duplicated inputs.
pub fn slotted_conv3x3(
    g: &mut Graph,
    x: Var,
    grid: (usize, usize),
    kernel: Var,
    bias: Option<Var>,
    slots: usize,
) -> Var {
    let cin = g.shape(x).1;
    assert_eq!(cin % slots, 0, "slot width");
    let c = cin / slots;
    let mut acc: Option<Var> = None;
    for s in 0..slots {
        let part = if slots == 1 { x } else { g.slice_cols(x, s * c, c) };
        let k = if slots == 1 { kernel } else { g.slice_rows(kernel, s * 9 * c, 9 * c) };
        let (y, _) = conv3x3(g, part, grid, k, None, 1);
        acc = Some(match acc {
            None => y,
            Some(a) => g.add(a, y),
        });
    }
    let out = acc.expect("at least one slot");
    match bias {
        Some(b) => g.add_row(out, b),
        None => out,
    }
}

/// Marigold-style widening of a first-layer kernel: `factor` stacked copies,
/// each scaled by `1/factor`.
pub fn adapt_input_layer(original: &Matrix, factor: usize) -> Matrix {
    assert!(factor >= 1, "duplication factor must be positive");
    if factor == 1 {
        return original.clone();
    }
    let half = original.scaled(1.0 / factor as f64);
    let copies: Vec<&Matrix> = std::iter::repeat_n(&half, factor).collect();
    Matrix::vstack(&copies)
}

/// Value-level 3×3 convolution (stride 1, zero padding).
pub fn conv2d(input: &LatentTensor, kernel: &Matrix, bias: Option<&Matrix>) -> Result<LatentTensor> {
    if kernel.rows != 9 * input.c {
        return Err(Error::ShapeMismatch(format!(
            "kernel expects {} input channels, latent has {}",
            kernel.rows / 9,
            input.c
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(input.to_matrix());
    let k = g.constant(kernel.clone());
    let b = bias.map(|b| g.constant(b.clone()));
    let (y, _) = conv3x3(&mut g, x, (input.h, input.w), k, b, 1);
    Ok(LatentTensor::from_matrix(input.h, input.w, g.value(y).clone()))
}

/// Value-level application of a slotted (widened) first layer.
pub fn slotted_conv2d(
    input: &LatentTensor,
    kernel: &Matrix,
    bias: Option<&Matrix>,
    slots: usize,
) -> Result<LatentTensor> {
    if kernel.rows != 9 * input.c || input.c % slots != 0 {
        return Err(Error::ShapeMismatch("slotted kernel vs input channels".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(input.to_matrix());
    let k = g.constant(kernel.clone());
    let b = bias.map(|b| g.constant(b.clone()));
    let y = slotted_conv3x3(&mut g, x, (input.h, input.w), k, b, slots);
    Ok(LatentTensor::from_matrix(input.h, input.w, g.value(y).clone()))
}
