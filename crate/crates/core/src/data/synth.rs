use crate::raster::Raster;

/// Minimum luminance step between 4-neighbours that counts as an edge.
pub const EDGE_THRESHOLD: f64 = 0.2;

/// Stand-in for a learned photo-to-sketch generator.
///
/// A pixel is a stroke candidate when some 4-neighbour is brighter by more
/// than [`EDGE_THRESHOLD`] (the dark side of a luminance edge). Candidates
/// whose in-image 4-neighbours are all candidates are removed, which keeps
/// strokes one pixel thick. Output is grayscale, ink 0 on a white ground.
/// Because every kept pixel borders a non-stroke pixel, the operator is
/// idempotent on its own output.
pub fn synthesize_sketch(image: &Raster) -> Raster {
    synthesize_sketch_with(image, EDGE_THRESHOLD)
}

pub fn synthesize_sketch_with(image: &Raster, threshold: f64) -> Raster {
    let (w, h) = (image.width, image.height);
    let lum = image.luminance();
    let neighbours = |x: usize, y: usize| {
        let mut n = Vec::with_capacity(4);
        if x > 0 {
            n.push((x - 1, y));
        }
        if x + 1 < w {
            n.push((x + 1, y));
        }
        if y > 0 {
            n.push((x, y - 1));
        }
        if y + 1 < h {
            n.push((x, y + 1));
        }
        n
    };
    let mut candidate = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let l = lum[y * w + x];
            candidate[y * w + x] = neighbours(x, y)
                .iter()
                .any(|&(nx, ny)| lum[ny * w + nx] - l > threshold);
        }
    }
    let mut out = Raster::filled(w, h, 1, 1.0);
    for y in 0..h {
        for x in 0..w {
            if candidate[y * w + x] && neighbours(x, y).iter().any(|&(nx, ny)| !candidate[ny * w + nx]) {
                out.set(x, y, 0, 0.0);
            }
        }
    }
    out
}
