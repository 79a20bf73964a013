//! Unfolding helpers shared by the float and integer convolution paths.
//!
//! Convolutions here are valid (no padding) with stride 1.

/// Geometry of a single-sample valid convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 1 - self.kernel_h
    }

    pub fn out_w(&self) -> usize {
        self.width + 1 - self.kernel_w
    }

    /// Rows of the unfolded matrix (`Cin * kh * kw`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the unfolded matrix (`Ho * Wo`).
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// Unfolds one `[Cin, H, W]` sample into a `[Cin*kh*kw, Ho*Wo]` matrix.
pub fn im2col<E: Copy>(x: &[E], g: &ConvGeom, col: &mut [E]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pos = oh * ow;
    debug_assert_eq!(x.len(), g.input_len());
    debug_assert_eq!(col.len(), g.patch_len() * pos);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let dst = &mut col[row * pos..(row + 1) * pos];
                for y in 0..oh {
                    let src = &plane[(y + i) * g.width + j..(y + i) * g.width + j + ow];
                    dst[y * ow..(y + 1) * ow].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds an unfolded gradient back onto the input.
pub fn col2im_add<E: Copy + std::ops::AddAssign>(col: &[E], g: &ConvGeom, x: &mut [E]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pos = oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let src = &col[row * pos..(row + 1) * pos];
                for y in 0..oh {
                    let base = (y + i) * g.width + j;
                    for xo in 0..ow {
                        plane[base + xo] += src[y * ow + xo];
                    }
                }
                row += 1;
            }
        }
    }
}
