use crate::error::{FipError, Result};
use crate::modalities::ImageTensor;
use crate::tensor_ad::{Real, Tensor};

/// Splits a 3 x H x H image into non-overlapping P x P patches in row-major
/// order. Each row of the result is one patch flattened channel, then row,
/// then column: `[(H/P)^2, 3 P^2]`.
pub fn patchify(image: &ImageTensor, patch: usize) -> Result<Tensor<f32>> {
    let h = image.size();
    if patch == 0 || !h.is_multiple_of(patch) {
        return Err(FipError::invalid(format!("image size {h} not divisible by patch size {patch}")));
    }
    let g = h / patch;
    let pd = 3 * patch * patch;
    let mut out = Vec::with_capacity(g * g * pd);
    for py in 0..g {
        for px in 0..g {
            for c in 0..3 {
                for r in 0..patch {
                    for col in 0..patch {
                        out.push(image.get(c, py * patch + r, px * patch + col));
                    }
                }
            }
        }
    }
    Tensor::new(vec![g * g, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor<f32>, image_size: usize, patch: usize) -> Result<ImageTensor> {
    if patch == 0 || !image_size.is_multiple_of(patch) {
        return Err(FipError::invalid("image size not divisible by patch size"));
    }
    let g = image_size / patch;
    let pd = 3 * patch * patch;
    if patches.shape() != [g * g, pd] {
        return Err(FipError::ShapeMismatch {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![g * g, pd],
        });
    }
    let mut img = ImageTensor::zeros(image_size);
    let data = patches.data();
    for py in 0..g {
        for px in 0..g {
            let row = &data[(py * g + px) * pd..][..pd];
            for c in 0..3 {
                for r in 0..patch {
                    for col in 0..patch {
                        img.set(c, py * patch + r, px * patch + col, row[(c * patch + r) * patch + col]);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Fixed 2-D sine-cosine table `[grid^2, dim]`: the first half of each row
/// encodes the patch row, the second half the patch column.
pub fn sincos_pos_embed<T: Real>(grid: usize, dim: usize) -> Tensor<T> {
    assert!(dim.is_multiple_of(4), "positional width must be a multiple of 4");
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(grid * grid * dim);
    for i in 0..grid * grid {
        let coords = [(i / grid) as f64, (i % grid) as f64];
        for pos in coords {
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                out.push(T::from_f64_lossy((pos * omega).sin()));
            }
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                out.push(T::from_f64_lossy((pos * omega).cos()));
            }
        }
    }
    Tensor::new(vec![grid * grid, dim], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn desk_patch_counts() {
        let img = ImageTensor::zeros(32);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.shape(), &[16, 192]);
        assert!(patchify(&img, 5).is_err());
    }

    #[test]
    fn constant_image_constant_patches() {
        let img = ImageTensor::from_vec(16, vec![0.375; 3 * 256]).unwrap();
        let p = patchify(&img, 4).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn flattening_order() {
        let size = 4;
        let data: Vec<f32> = (0..3 * size * size).map(|i| i as f32).collect();
        let img = ImageTensor::from_vec(size, data).unwrap();
        let p = patchify(&img, 2).unwrap();
        // Patch (0, 1): channel 0 rows 0..2, columns 2..4, then channel 1.
        assert_eq!(&p.data()[12..18], &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0]);
    }

    #[test]
    fn pos_embed_rows_distinct() {
        let t = sincos_pos_embed::<f64>(4, 16);
        assert_eq!(t.shape(), &[16, 16]);
        let rows: Vec<&[f64]> = t.data().chunks(16).collect();
        for i in 0..16 {
            for j in 0..i {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(seed in any::<u64>(), grid in 1usize..5, patch in 1usize..5) {
            let size = grid * patch;
            let mut x = seed;
            let data: Vec<f32> = (0..3 * size * size)
                .map(|_| { x = x.wrapping_mul(6364136223846793005).wrapping_add(1); (x >> 40) as f32 / 16777216.0 })
                .collect();
            let img = ImageTensor::from_vec(size, data).unwrap();
            let back = unpatchify(&patchify(&img, patch).unwrap(), size, patch).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
