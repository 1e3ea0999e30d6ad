//! Display subpixel rendering and the camera color-filter-array pair:
//! RGGB sampling and bilinear demosaicing. These two sampling lattices are
//! what beat against each other to form moire.

use super::{BayerMosaic, Image};
use crate::error::{Error, Result};

/// Expand each source pixel into a 3x3 cell of vertical R, G, B stripes,
/// mimicking an LCD panel: column 0 of the cell emits only red at the
/// pixel's red value, column 1 only green, column 2 only blue.
pub fn subpixel_render(src: &Image) -> Image {
    let (h, w) = (src.height(), src.width());
    let mut out = Image::new(3 * h, 3 * w);
    for y in 0..h {
        for x in 0..w {
            let px = src.pixel(y, x);
            for dy in 0..3 {
                for c in 0..3 {
                    let mut rgb = [0.0f32; 3];
                    rgb[c] = px[c];
                    out.set(3 * y + dy, 3 * x + c, rgb);
                }
            }
        }
    }
    out
}

/// Keep one color sample per site following the RGGB tile.
pub fn bayer_sample(src: &Image) -> Result<BayerMosaic> {
    let (h, w) = (src.height(), src.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(format!(
            "bayer_sample needs even dimensions, got {h}x{w}"
        )));
    }
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(src.get(y, x, BayerMosaic::site_color(y, x)));
        }
    }
    BayerMosaic::new(h, w, data)
}

/// Bilinear CFA interpolation: each missing color is the mean of its
/// nearest same-color neighbors, with border replication. Deliberately
/// non-edge-adaptive, so sampling aliases survive into the output.
pub fn demosaic_bilinear(m: &BayerMosaic) -> Image {
    let (h, w) = (m.height(), m.width());
    let mut out = Image::new(h, w);
    let at = |y: i64, x: i64| -> f32 {
        m.get(
            y.clamp(0, h as i64 - 1) as usize,
            x.clamp(0, w as i64 - 1) as usize,
        )
    };
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as i64, x as i64);
            let v = m.get(y, x);
            let orth =
                (at(yi - 1, xi) + at(yi + 1, xi) + at(yi, xi - 1) + at(yi, xi + 1)) / 4.0;
            let diag = (at(yi - 1, xi - 1)
                + at(yi - 1, xi + 1)
                + at(yi + 1, xi - 1)
                + at(yi + 1, xi + 1))
                / 4.0;
            let horiz = (at(yi, xi - 1) + at(yi, xi + 1)) / 2.0;
            let vert = (at(yi - 1, xi) + at(yi + 1, xi)) / 2.0;
            let rgb = match (y % 2, x % 2) {
                // red site: green from the 4-neighborhood, blue from diagonals
                (0, 0) => [v, orth, diag],
                // green site in a red row: red left/right, blue above/below
                (0, 1) => [horiz, v, vert],
                // green site in a blue row: red above/below, blue left/right
                (1, 0) => [vert, v, horiz],
                // blue site
                _ => [diag, orth, v],
            };
            out.set(y, x, rgb);
        }
    }
    out.clamp_in_place();
    out
}
