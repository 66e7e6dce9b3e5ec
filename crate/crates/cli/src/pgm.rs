//! Binary (P5) portable graymap output for tile grids.

/// An 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// `round(255 · p)` for a probability `p`.
pub fn gray_level(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, 1.0)).round() as u8
}

/// Lay `tiles` (each `h × w` probabilities, row-major) out `cols` to a row,
/// separated by one-pixel black lines between tiles (none around the edge).
pub fn tile_grid(tiles: &[Vec<f64>], h: usize, w: usize, cols: usize) -> GrayImage {
    let cols = cols.min(tiles.len()).max(1);
    let rows = tiles.len().div_ceil(cols);
    let width = cols * w + (cols - 1);
    let height = rows * h + (rows.max(1) - 1);
    let mut pixels = vec![0u8; width * height];
    for (t, tile) in tiles.iter().enumerate() {
        let (r, c) = (t / cols, t % cols);
        let (y0, x0) = (r * (h + 1), c * (w + 1));
        for y in 0..h {
            for x in 0..w {
                pixels[(y0 + y) * width + x0 + x] = gray_level(tile[y * w + x]);
            }
        }
    }
    GrayImage {
        width,
        height,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tile_has_no_separators() {
        let img = tile_grid(&[vec![0.0, 1.0, 0.5, 0.2]], 2, 2, 1);
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![0, 255, 128, 51]);
    }

    #[test]
    fn grid_geometry() {
        let tiles = vec![vec![1.0; 6]; 5];
        let img = tile_grid(&tiles, 2, 3, 3);
        assert_eq!((img.width, img.height), (3 * 3 + 2, 2 * 2 + 1));
        // separator column after the first tile
        assert_eq!(img.pixels[3], 0);
        // the missing sixth tile stays black
        assert_eq!(img.pixels[(img.height - 1) * img.width + img.width - 1], 0);
        assert_eq!(img.pixels[0], 255);
    }

    #[test]
    fn pgm_header() {
        let img = tile_grid(&[vec![1.0]], 1, 1, 1);
        assert_eq!(img.to_pgm(), b"P5\n1 1\n255\n\xff".to_vec());
    }
}
