use crate::cube::HsiCube;
use crate::error::{invalid, Result};

/// Water-absorption bands of the 224-band Indian Pines scene, 1-based
/// (104-108, 150-163 and 220).
pub const INDIAN_PINES_WATER_BANDS_1BASED: [usize; 20] = [
    104, 105, 106, 107, 108, 150, 151, 152, 153, 154, 155, 156, 157, 158, 159, 160, 161, 162, 163,
    220,
];

/// Zero-based form of [`INDIAN_PINES_WATER_BANDS_1BASED`].
pub fn indian_pines_water_bands() -> Vec<usize> {
    INDIAN_PINES_WATER_BANDS_1BASED.iter().map(|b| b - 1).collect()
}

/// Drops the listed zero-based bands, keeping the rest in order.
pub fn remove_bands(cube: &HsiCube, indices: &[usize]) -> Result<HsiCube> {
    let b = cube.bands();
    let mut drop = vec![false; b];
    for &i in indices {
        if i >= b {
            return Err(invalid("band index", format!("{i} out of range for {b} bands")));
        }
        if drop[i] {
            return Err(invalid("band index", format!("{i} listed twice")));
        }
        drop[i] = true;
    }
    if indices.len() == b {
        return Err(invalid("band index", "cannot remove every band"));
    }
    let mut data = Vec::with_capacity((b - indices.len()) * cube.pixels());
    for band in (0..b).filter(|&k| !drop[k]) {
        data.extend_from_slice(cube.band(band));
    }
    HsiCube::new(b - indices.len(), cube.height(), cube.width(), data)
}

/// Bands whose every sample is exactly zero.
pub fn zero_bands(cube: &HsiCube) -> Vec<usize> {
    (0..cube.bands()).filter(|&b| cube.band(b).iter().all(|&v| v == 0.0)).collect()
}

/// Reduces an Indian Pines cube to its 200 usable bands.
///
/// The water-absorption list is numbered against the 220-band product. A raw
/// 224-band cube carries four additional all-zero bands, which are dropped
/// first so that the numbering lines up.
pub fn clean_indian_pines(cube: &HsiCube) -> Result<HsiCube> {
    let cube = match cube.bands() {
        224 => {
            let zeros = zero_bands(cube);
            if zeros.len() != 4 {
                return Err(invalid(
                    "indian pines cube",
                    format!("expected 4 all-zero bands in a 224-band cube, found {}", zeros.len()),
                ));
            }
            remove_bands(cube, &zeros)?
        }
        220 | 200 => cube.clone(),
        b => {
            return Err(invalid("indian pines cube", format!("unexpected band count {b}")));
        }
    };
    if cube.bands() == 200 {
        return Ok(cube);
    }
    remove_bands(&cube, &indian_pines_water_bands())
}
