//! Slow, literal implementations used as independent oracles.
//!
//! Everything here follows the defining sums one scalar at a time with no
//! layout or vectorization tricks, so results can be trusted as the meaning
//! of the operation. The optimized kernels in [`crate::tensor`] are checked
//! against this module both in tests and by the `gradcheck` command.

use crate::error::Result;
use crate::tensor::{ConvSpec, Tensor};

/// Direct evaluation of the padded dilated convolution:
/// `out(o, y, x) = bias(o) + sum in(ci, y - d*(u-r), x - d*(v-r)) * ker(o, ci, u, v)`
/// with zero for reads outside the image.
pub fn conv2d_reference(input: &Tensor, kernels: &Tensor, bias: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    // Reuse the fast path's validation by probing it once on shape errors.
    let ishape = input.shape().to_vec();
    let kshape = kernels.shape().to_vec();
    crate::tensor::conv2d_dilated(input, kernels, bias, spec)?;

    let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
    let cout = kshape[0];
    let k = spec.kernel_size();
    let r = (k as isize - 1) / 2;
    let d = spec.dilation() as isize;
    let mut out = Tensor::zeros(&[cout, h, w]);
    for o in 0..cout {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = bias.data()[o];
                for ci in 0..cin {
                    for u in 0..k as isize {
                        for v in 0..k as isize {
                            let iy = y - d * (u - r);
                            let ix = x - d * (v - r);
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let iv = input.data()[(ci * h + iy as usize) * w + ix as usize];
                            let kv = kernels.data()
                                [((o * cin + ci) * k + u as usize) * k + v as usize];
                            acc += iv * kv;
                        }
                    }
                }
                out.data_mut()[(o * h + y as usize) * w + x as usize] = acc;
            }
        }
    }
    Ok(out)
}
