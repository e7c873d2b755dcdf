//! Mask ingestion and per-instance feature extraction.
//!
//! Shape features come from pixel-count area, a traced outer boundary with a
//! calibrated chain-length perimeter, and ellipse axes fitted from second
//! central moments. Texture features are rotation-invariant uniform local
//! binary patterns with an (8,1) bilinear-sampled neighbourhood. The module
//! also holds the threshold contour segmenter and min-max feature scaling.

use crate::pgm::{GrayImage, RasterMeta};
use crate::spatial::Point2;
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MorphologyError {
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("gray raster {gray:?} does not match mask raster {mask:?}")]
    DimMismatch {
        gray: (usize, usize),
        mask: (usize, usize),
    },
    #[error("min-max scaling needs at least one fit row")]
    NoFitRows,
}

/// Binary raster of one instance (a glomerulus or an immune cell), placed in
/// slide space by a micrometre origin and a µm/pixel resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub width: usize,
    pub height: usize,
    pub bitmap: Vec<bool>,
    pub origin_um: [f64; 2],
    pub resolution: f64,
}

impl InstanceMask {
    /// Builds a mask, requiring at least one foreground pixel and a positive
    /// resolution.
    pub fn new(
        width: usize,
        height: usize,
        bitmap: Vec<bool>,
        origin_um: [f64; 2],
        resolution: f64,
    ) -> Result<Self, MorphologyError> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(MorphologyError::BadResolution(resolution));
        }
        assert_eq!(bitmap.len(), width * height, "bitmap length mismatch");
        if !bitmap.iter().any(|&b| b) {
            return Err(MorphologyError::EmptyMask);
        }
        Ok(InstanceMask {
            width,
            height,
            bitmap,
            origin_um,
            resolution,
        })
    }

    /// Interprets any pixel > 0 as foreground.
    pub fn from_gray(img: &GrayImage, meta: RasterMeta) -> Result<Self, MorphologyError> {
        Self::new(
            img.width,
            img.height,
            img.data.iter().map(|&v| v > 0).collect(),
            meta.origin_um,
            meta.resolution_um_per_px,
        )
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bitmap[y * self.width + x]
    }

    pub fn pixel_count(&self) -> usize {
        self.bitmap.iter().filter(|&&b| b).count()
    }

    /// Centroid of foreground pixel centres, in micrometres.
    pub fn centroid_um(&self) -> Point2 {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        let n = n as f64;
        Point2::new(
            self.origin_um[0] + sx / n * self.resolution,
            self.origin_um[1] + sy / n * self.resolution,
        )
    }

    /// True if the micrometre point falls on a foreground pixel.
    pub fn contains_um(&self, p: Point2) -> bool {
        let fx = (p.x - self.origin_um[0]) / self.resolution;
        let fy = (p.y - self.origin_um[1]) / self.resolution;
        if fx < 0.0 || fy < 0.0 {
            return false;
        }
        let (x, y) = (fx as usize, fy as usize);
        x < self.width && y < self.height && self.get(x, y)
    }
}

// ---------------------------------------------------------------------------
// Connected components
// ---------------------------------------------------------------------------

/// 8-connected foreground components as pixel lists, in scan order of their
/// first pixel.
pub fn connected_components(
    width: usize,
    height: usize,
    fg: &[bool],
) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; fg.len()];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % width, idx / width);
            pixels.push((x, y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                        continue;
                    }
                    let nidx = ny as usize * width + nx as usize;
                    if fg[nidx] && !seen[nidx] {
                        seen[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        components.push(pixels);
    }
    components
}

// ---------------------------------------------------------------------------
// Shape features
// ---------------------------------------------------------------------------

/// Shape descriptors of one instance, in micrometre units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeFeatures {
    pub area: f64,
    pub perimeter: f64,
    pub eccentricity: f64,
    pub circularity: f64,
    pub aspect_ratio: f64,
}

/// Unbiased chain-length factor: a raw 8-connected chain overestimates
/// smooth boundaries by ~5.5%, so segment lengths are rescaled to keep
/// 4πA/P² of a digital disk near 1.
const CHAIN_LENGTH_FACTOR: f64 = std::f64::consts::PI / 8.0 * (1.0 + std::f64::consts::SQRT_2);

/// Clockwise Moore neighbourhood, starting east, y pointing down.
const MOORE: [(i64, i64); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

/// Traces the outer boundary of the component containing `start` and returns
/// (axis steps, diagonal steps) of the closed chain.
fn trace_boundary(width: usize, height: usize, fg: &[bool], start: (usize, usize)) -> (usize, usize) {
    let is_fg = |x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && x < width as i64 && y < height as i64 && fg[y as usize * width + x as usize]
    };
    let start = (start.0 as i64, start.1 as i64);
    let scan = |pixel: (i64, i64), backtrack_dir: usize| -> Option<(usize, (i64, i64))> {
        for step in 1..=8 {
            let dir = (backtrack_dir + step) % 8;
            let (dx, dy) = MOORE[dir];
            if is_fg(pixel.0 + dx, pixel.1 + dy) {
                return Some((dir, (pixel.0 + dx, pixel.1 + dy)));
            }
        }
        None
    };
    // `start` is the first foreground pixel in scan order, so its western
    // neighbour is background; the clockwise scan begins there.
    let Some((first_dir, first_next)) = scan(start, 4) else {
        return (0, 0); // isolated pixel
    };
    let (mut axis, mut diag) = (0usize, 0usize);
    let mut count_step = |dir: usize| {
        if dir % 2 == 0 {
            axis += 1;
        } else {
            diag += 1;
        }
    };
    count_step(first_dir);
    let mut current = first_next;
    let mut dir = first_dir;
    // The walk is a deterministic function of (pixel, entry direction), so
    // the cycle is complete exactly when the initial state recurs.
    let max_steps = 4 * fg.iter().filter(|&&b| b).count() + 8;
    for _ in 0..max_steps {
        let Some((d, next)) = scan(current, (dir + 4) % 8) else {
            break;
        };
        if next == first_next && d == first_dir {
            break;
        }
        count_step(d);
        current = next;
        dir = d;
    }
    (axis, diag)
}

/// Computes shape features of the largest 8-connected component.
///
/// Area is foreground pixel count times resolution²; the perimeter is the
/// calibrated traced-boundary chain length; eccentricity and aspect ratio
/// come from the ellipse with matching second central moments under a
/// unit-square pixel model (each pixel contributes 1/12 axis variance), which
/// keeps both finite for degenerate masks. A single-pixel mask is defined to
/// have perimeter 4·resolution, eccentricity 0, aspect ratio 1.
pub fn shape_features(mask: &InstanceMask) -> ShapeFeatures {
    let components = connected_components(mask.width, mask.height, &mask.bitmap);
    let pixels = components
        .iter()
        .max_by_key(|c| c.len())
        .expect("mask invariant: at least one foreground pixel");
    let res = mask.resolution;
    let n = pixels.len() as f64;
    let area = n * res * res;

    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for &(x, y) in pixels {
        sx += x as f64;
        sy += y as f64;
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut cxx, mut cyy, mut cxy) = (0.0f64, 0.0, 0.0);
    for &(x, y) in pixels {
        let dx = x as f64 - mx;
        let dy = y as f64 - my;
        cxx += dx * dx;
        cyy += dy * dy;
        cxy += dx * dy;
    }
    cxx = cxx / n + 1.0 / 12.0;
    cyy = cyy / n + 1.0 / 12.0;
    cxy /= n;
    let tr = cxx + cyy;
    let det = (cxx - cyy) * 0.5;
    let disc = (det * det + cxy * cxy).sqrt();
    let lambda1 = tr * 0.5 + disc;
    let lambda2 = (tr * 0.5 - disc).max(1e-12);
    let eccentricity = (1.0 - lambda2 / lambda1).max(0.0).sqrt();
    let aspect_ratio = (lambda1 / lambda2).sqrt();

    let perimeter = if pixels.len() == 1 {
        4.0 * res
    } else {
        // Trace on a buffer holding only the selected component so other
        // components cannot interfere with the boundary walk.
        let only: Vec<bool> = if components.len() == 1 {
            mask.bitmap.clone()
        } else {
            let mut buf = vec![false; mask.width * mask.height];
            for &(x, y) in pixels {
                buf[y * mask.width + x] = true;
            }
            buf
        };
        let start = *pixels
            .iter()
            .min_by_key(|&&(x, y)| (y, x))
            .expect("non-empty component");
        let (axis, diag) = trace_boundary(mask.width, mask.height, &only, start);
        let chain = axis as f64 + std::f64::consts::SQRT_2 * diag as f64;
        if chain == 0.0 {
            4.0 * res
        } else {
            CHAIN_LENGTH_FACTOR * chain * res
        }
    };

    let circularity = 4.0 * std::f64::consts::PI * area / (perimeter * perimeter);
    ShapeFeatures {
        area,
        perimeter,
        eccentricity,
        circularity,
        aspect_ratio,
    }
}

// ---------------------------------------------------------------------------
// Local binary patterns
// ---------------------------------------------------------------------------

/// Number of 8-bit patterns with at most two circular 0↔1 transitions.
pub const UNIFORM_PATTERNS: usize = 58;
/// Histogram length: one bin per uniform pattern plus a catch-all.
pub const LBP_BINS: usize = UNIFORM_PATTERNS + 1;

/// Normalised LBP histogram over the mask's valid foreground pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureFeatures {
    pub lbp_hist: Vec<f64>,
    pub valid_pixels: usize,
    /// Set when no pixel had a full (8,1) neighbourhood; the histogram is
    /// then uniform.
    pub degenerate: bool,
}

pub fn circular_transitions(pattern: u8) -> u32 {
    (pattern ^ pattern.rotate_right(1)).count_ones()
}

pub fn is_uniform(pattern: u8) -> bool {
    circular_transitions(pattern) <= 2
}

fn rotation_min(pattern: u8) -> u8 {
    (0..8).map(|r| pattern.rotate_right(r)).min().unwrap()
}

/// Maps every 8-bit pattern to its histogram bin. Patterns are first reduced
/// to their minimal circular rotation so the binning is rotation invariant;
/// uniform patterns land on the bin of their canonical representative and
/// everything else on the catch-all bin.
fn lbp_bin_table() -> [usize; 256] {
    let mut uniform: Vec<u8> = (0u16..256).map(|p| p as u8).filter(|&p| is_uniform(p)).collect();
    uniform.sort_unstable();
    debug_assert_eq!(uniform.len(), UNIFORM_PATTERNS);
    let mut table = [UNIFORM_PATTERNS; 256];
    for (p, slot) in table.iter_mut().enumerate() {
        let canon = rotation_min(p as u8);
        if is_uniform(canon) {
            *slot = uniform.binary_search(&canon).expect("canonical uniform pattern");
        }
    }
    table
}

/// Computes the uniform-LBP histogram of the mask's foreground over `gray`.
///
/// The rasters must share dimensions (callers crop the intensity channel to
/// the mask). Each valid pixel samples 8 positions on the unit circle with
/// bilinear interpolation; a bit is set when the neighbour is ≥ the centre,
/// which makes the histogram exactly invariant to positive affine intensity
/// maps. With zero valid pixels the histogram is uniform and flagged.
pub fn lbp_histogram(gray: &GrayImage, mask: &InstanceMask) -> Result<TextureFeatures, MorphologyError> {
    if gray.width != mask.width || gray.height != mask.height {
        return Err(MorphologyError::DimMismatch {
            gray: (gray.width, gray.height),
            mask: (mask.width, mask.height),
        });
    }
    let table = lbp_bin_table();
    // Exact sample offsets: axis-aligned samples hit pixel centres exactly so
    // equal-intensity ties behave identically in every direction.
    const D: f64 = std::f64::consts::SQRT_2 / 2.0;
    const OFFSETS: [(f64, f64); 8] = [
        (1.0, 0.0),
        (D, D),
        (0.0, 1.0),
        (-D, D),
        (-1.0, 0.0),
        (-D, -D),
        (0.0, -1.0),
        (D, -D),
    ];
    let sample = |fx: f64, fy: f64| -> f64 {
        let x0 = fx.floor();
        let y0 = fy.floor();
        let dx = fx - x0;
        let dy = fy - y0;
        let (x0, y0) = (x0 as usize, y0 as usize);
        let x1 = if dx > 0.0 { x0 + 1 } else { x0 };
        let y1 = if dy > 0.0 { y0 + 1 } else { y0 };
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        // The nested form keeps constant neighbourhoods exactly constant.
        let top = lerp(gray.get(x0, y0) as f64, gray.get(x1, y0) as f64, dx);
        let bottom = lerp(gray.get(x0, y1) as f64, gray.get(x1, y1) as f64, dx);
        lerp(top, bottom, dy)
    };

    let mut hist = vec![0.0f64; LBP_BINS];
    let mut valid = 0usize;
    if mask.width >= 3 && mask.height >= 3 {
        for y in 1..mask.height - 1 {
            for x in 1..mask.width - 1 {
                if !mask.get(x, y) {
                    continue;
                }
                let center = gray.get(x, y) as f64;
                let mut pattern = 0u8;
                for (k, &(ox, oy)) in OFFSETS.iter().enumerate() {
                    if sample(x as f64 + ox, y as f64 + oy) >= center {
                        pattern |= 1 << k;
                    }
                }
                hist[table[pattern as usize]] += 1.0;
                valid += 1;
            }
        }
    }
    if valid == 0 {
        log::warn!("lbp_histogram: no pixel had a full neighbourhood; returning uniform histogram");
        return Ok(TextureFeatures {
            lbp_hist: vec![1.0 / LBP_BINS as f64; LBP_BINS],
            valid_pixels: 0,
            degenerate: true,
        });
    }
    for h in &mut hist {
        *h /= valid as f64;
    }
    Ok(TextureFeatures {
        lbp_hist: hist,
        valid_pixels: valid,
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Inside-glomerulus test
// ---------------------------------------------------------------------------

/// 1 iff the centroid's pixel is foreground in any glomerulus mask.
pub fn inside_glomerulus(cell_centroid: Point2, glom_masks: &[InstanceMask]) -> u8 {
    glom_masks.iter().any(|m| m.contains_um(cell_centroid)) as u8
}

// ---------------------------------------------------------------------------
// Contour segmentation
// ---------------------------------------------------------------------------

/// Threshold segmenter: binarise at `intensity_thresh` (≥), split into
/// 8-connected components and keep those of at least `area_thresh_px` pixels.
/// Each surviving component becomes one tightly-cropped [`InstanceMask`].
pub fn contour_segment(
    channel: &GrayImage,
    meta: RasterMeta,
    intensity_thresh: u8,
    area_thresh_px: usize,
) -> Vec<InstanceMask> {
    let fg: Vec<bool> = channel.data.iter().map(|&v| v >= intensity_thresh).collect();
    let components = connected_components(channel.width, channel.height, &fg);
    let res = meta.resolution_um_per_px;
    components
        .into_iter()
        .filter(|c| c.len() >= area_thresh_px)
        .map(|pixels| {
            let min_x = pixels.iter().map(|p| p.0).min().unwrap();
            let max_x = pixels.iter().map(|p| p.0).max().unwrap();
            let min_y = pixels.iter().map(|p| p.1).min().unwrap();
            let max_y = pixels.iter().map(|p| p.1).max().unwrap();
            let (w, h) = (max_x - min_x + 1, max_y - min_y + 1);
            let mut bitmap = vec![false; w * h];
            for (x, y) in pixels {
                bitmap[(y - min_y) * w + (x - min_x)] = true;
            }
            InstanceMask::new(
                w,
                h,
                bitmap,
                [
                    meta.origin_um[0] + min_x as f64 * res,
                    meta.origin_um[1] + min_y as f64 * res,
                ],
                res,
            )
            .expect("component is non-empty")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Min-max scaling
// ---------------------------------------------------------------------------

/// Per-column minima and maxima fitted on training rows.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScaleParams {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl ScaleParams {
    /// Fits on the selected rows only.
    pub fn fit(matrix: &Array2<f64>, fit_rows: &[usize]) -> Result<ScaleParams, MorphologyError> {
        if fit_rows.is_empty() {
            return Err(MorphologyError::NoFitRows);
        }
        let cols = matrix.ncols();
        let mut mins = vec![f64::INFINITY; cols];
        let mut maxs = vec![f64::NEG_INFINITY; cols];
        for &r in fit_rows {
            for c in 0..cols {
                let v = matrix[[r, c]];
                mins[c] = mins[c].min(v);
                maxs[c] = maxs[c].max(v);
            }
        }
        Ok(ScaleParams { mins, maxs })
    }

    /// Applies (x − min)/(max − min) per column; constant columns map to 0.
    /// Values outside the fitted range are not clipped.
    pub fn transform(&self, matrix: &Array2<f64>) -> Array2<f64> {
        let mut out = matrix.clone();
        for c in 0..matrix.ncols() {
            let span = self.maxs[c] - self.mins[c];
            for r in 0..matrix.nrows() {
                out[[r, c]] = if span > 0.0 {
                    (matrix[[r, c]] - self.mins[c]) / span
                } else {
                    0.0
                };
            }
        }
        out
    }

    /// Inverse of [`Self::transform`] on non-constant columns; constant
    /// columns recover the fitted value.
    pub fn inverse(&self, matrix: &Array2<f64>) -> Array2<f64> {
        let mut out = matrix.clone();
        for c in 0..matrix.ncols() {
            let span = self.maxs[c] - self.mins[c];
            for r in 0..matrix.nrows() {
                out[[r, c]] = if span > 0.0 {
                    matrix[[r, c]] * span + self.mins[c]
                } else {
                    self.mins[c]
                };
            }
        }
        out
    }

    /// Scales a single scalar from column `c`.
    pub fn transform_scalar(&self, c: usize, v: f64) -> f64 {
        let span = self.maxs[c] - self.mins[c];
        if span > 0.0 {
            (v - self.mins[c]) / span
        } else {
            0.0
        }
    }
}

/// Fits on `fit_rows` and transforms the whole matrix in one call.
pub fn min_max_scale(
    matrix: &Array2<f64>,
    fit_rows: &[usize],
) -> Result<(Array2<f64>, ScaleParams), MorphologyError> {
    let params = ScaleParams::fit(matrix, fit_rows)?;
    Ok((params.transform(matrix), params))
}

// ---------------------------------------------------------------------------
// Feature vectors
// ---------------------------------------------------------------------------

/// Glomerulus feature vector length: 59 LBP bins then area, perimeter,
/// eccentricity, circularity, aspect ratio.
pub const GLOM_FEATURES: usize = LBP_BINS + 5;
/// Immune-cell feature vector: area, perimeter, eccentricity, circularity,
/// aspect ratio, inside-glomerulus flag.
pub const CELL_FEATURES: usize = 6;

pub fn glom_feature_vector(
    mask: &InstanceMask,
    gray: &GrayImage,
) -> Result<Vec<f64>, MorphologyError> {
    let tex = lbp_histogram(gray, mask)?;
    let shape = shape_features(mask);
    let mut v = tex.lbp_hist;
    v.extend_from_slice(&[
        shape.area,
        shape.perimeter,
        shape.eccentricity,
        shape.circularity,
        shape.aspect_ratio,
    ]);
    debug_assert_eq!(v.len(), GLOM_FEATURES);
    Ok(v)
}

pub fn cell_feature_vector(mask: &InstanceMask, glom_masks: &[InstanceMask]) -> Vec<f64> {
    let shape = shape_features(mask);
    let inside = inside_glomerulus(mask.centroid_um(), glom_masks);
    vec![
        shape.area,
        shape.perimeter,
        shape.eccentricity,
        shape.circularity,
        shape.aspect_ratio,
        inside as f64,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rect_mask(w: usize, h: usize, res: f64) -> InstanceMask {
        InstanceMask::new(w, h, vec![true; w * h], [0.0, 0.0], res).unwrap()
    }

    fn disk_mask(r: f64, res: f64) -> InstanceMask {
        let side = (2.0 * r) as usize + 4;
        let c = side as f64 / 2.0;
        let mut bitmap = vec![false; side * side];
        for y in 0..side {
            for x in 0..side {
                let dx = x as f64 + 0.5 - c;
                let dy = y as f64 + 0.5 - c;
                if dx * dx + dy * dy <= r * r {
                    bitmap[y * side + x] = true;
                }
            }
        }
        InstanceMask::new(side, side, bitmap, [0.0, 0.0], res).unwrap()
    }

    #[test]
    fn single_pixel_is_degenerate() {
        let mask = InstanceMask::new(1, 1, vec![true], [0.0, 0.0], 1.0).unwrap();
        let s = shape_features(&mask);
        assert_eq!(s.area, 1.0);
        assert_eq!(s.perimeter, 4.0);
        assert_eq!(s.eccentricity, 0.0);
        assert_eq!(s.aspect_ratio, 1.0);
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(matches!(
            InstanceMask::new(2, 2, vec![false; 4], [0.0, 0.0], 1.0),
            Err(MorphologyError::EmptyMask)
        ));
    }

    #[test]
    fn rectangle_moments_match_hand_oracle() {
        // Unit-square pixel model: var_x = (20² − 1)/12 + 1/12, var_y likewise,
        // so the axis ratio is exactly √(400/100) = 2.
        let mask = rect_mask(20, 10, 0.5);
        let s = shape_features(&mask);
        assert_abs_diff_eq!(s.aspect_ratio, 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.area, 200.0 * 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.eccentricity, (1.0f64 - 0.25).sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn disk_is_round() {
        let s = shape_features(&disk_mask(50.0, 1.0));
        assert!(s.circularity > 0.95 && s.circularity < 1.05, "circularity {}", s.circularity);
        assert!(s.eccentricity < 0.1, "eccentricity {}", s.eccentricity);
    }

    #[test]
    fn translation_leaves_shape_unchanged() {
        let base = disk_mask(12.0, 1.0);
        let mut shifted_bitmap = vec![false; (base.width + 6) * (base.height + 6)];
        for y in 0..base.height {
            for x in 0..base.width {
                if base.get(x, y) {
                    shifted_bitmap[(y + 3) * (base.width + 6) + x + 5] = true;
                }
            }
        }
        let shifted = InstanceMask::new(
            base.width + 6,
            base.height + 6,
            shifted_bitmap,
            [100.0, 200.0],
            1.0,
        )
        .unwrap();
        assert_eq!(shape_features(&base), shape_features(&shifted));
    }

    #[test]
    fn resolution_scales_area_and_perimeter() {
        let at1 = shape_features(&disk_mask(20.0, 1.0));
        let at3 = shape_features(&disk_mask(20.0, 3.0));
        assert_abs_diff_eq!(at3.area, at1.area * 9.0, epsilon = 1e-9);
        assert_abs_diff_eq!(at3.perimeter, at1.perimeter * 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(at3.eccentricity, at1.eccentricity, epsilon = 1e-12);
    }

    #[test]
    fn multi_component_uses_largest() {
        let mut bitmap = vec![false; 20 * 20];
        for y in 2..8 {
            for x in 2..8 {
                bitmap[y * 20 + x] = true;
            }
        }
        bitmap[15 * 20 + 15] = true;
        let mask = InstanceMask::new(20, 20, bitmap, [0.0, 0.0], 1.0).unwrap();
        assert_eq!(shape_features(&mask).area, 36.0);
    }

    #[test]
    fn uniform_pattern_count_is_58() {
        let n = (0u16..256).filter(|&p| is_uniform(p as u8)).count();
        assert_eq!(n, UNIFORM_PATTERNS);
    }

    #[test]
    fn constant_image_concentrates_one_bin() {
        let gray = GrayImage {
            width: 16,
            height: 16,
            data: vec![77; 256],
        };
        let mask = rect_mask(16, 16, 1.0);
        let t = lbp_histogram(&gray, &mask).unwrap();
        assert_eq!(t.lbp_hist.iter().filter(|&&h| h > 0.0).count(), 1);
        assert_abs_diff_eq!(t.lbp_hist.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    fn rotate90(img: &GrayImage) -> GrayImage {
        // (x, y) -> (h - 1 - y, x)
        let mut out = GrayImage::new(img.height, img.width);
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(img.height - 1 - y, x, img.get(x, y));
            }
        }
        out
    }

    #[test]
    fn step_edge_histogram_survives_quarter_rotation() {
        let (w, h) = (24, 24);
        let mut gray = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                gray.set(x, y, if x < w / 2 { 40 } else { 210 });
            }
        }
        let mask = rect_mask(w, h, 1.0);
        let a = lbp_histogram(&gray, &mask).unwrap();
        let b = lbp_histogram(&rotate90(&gray), &mask).unwrap();
        let l1: f64 = a
            .lbp_hist
            .iter()
            .zip(b.lbp_hist.iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(l1 <= 0.02, "l1 distance {l1}");
    }

    #[test]
    fn intensity_shift_and_positive_affine_leave_histogram_unchanged() {
        let mut gray = GrayImage::new(20, 20);
        for (i, px) in gray.data.iter_mut().enumerate() {
            *px = ((i * 37 + i / 7) % 173) as u8;
        }
        let mask = rect_mask(20, 20, 1.0);
        let base = lbp_histogram(&gray, &mask).unwrap();

        let shifted = GrayImage {
            width: 20,
            height: 20,
            data: gray.data.iter().map(|&v| v + 40).collect(),
        };
        assert_eq!(lbp_histogram(&shifted, &mask).unwrap().lbp_hist, base.lbp_hist);

        let affine = GrayImage {
            width: 20,
            height: 20,
            data: gray.data.iter().map(|&v| v / 2 + 30).collect(),
        };
        // u8 division halves monotonically; ties stay ties under ≥.
        let aff = lbp_histogram(&affine, &mask).unwrap();
        let l1: f64 = base
            .lbp_hist
            .iter()
            .zip(aff.lbp_hist.iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(l1 <= 0.05, "l1 distance {l1}");
    }

    #[test]
    fn no_valid_pixels_yield_uniform_flagged_histogram() {
        let gray = GrayImage {
            width: 2,
            height: 2,
            data: vec![9; 4],
        };
        let mask = rect_mask(2, 2, 1.0);
        let t = lbp_histogram(&gray, &mask).unwrap();
        assert!(t.degenerate);
        assert!(t.lbp_hist.iter().all(|&h| (h - 1.0 / 59.0).abs() < 1e-12));
    }

    #[test]
    fn inside_glomerulus_boundary_cases() {
        let disk = disk_mask(10.0, 1.0);
        let c = disk.centroid_um();
        assert_eq!(inside_glomerulus(c, &[disk.clone()]), 1);
        let outside = Point2::new(c.x + 12.0, c.y);
        assert_eq!(inside_glomerulus(outside, &[disk.clone()]), 0);
        assert_eq!(inside_glomerulus(Point2::new(-5.0, -5.0), &[disk]), 0);
    }

    #[test]
    fn inside_glomerulus_matches_point_in_disk_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let r = 15.0;
        let disk = disk_mask(r, 1.0);
        let side = disk.width as f64;
        let c = side / 2.0;
        for _ in 0..100 {
            let p = Point2::new(rng.random_range(0.0..side), rng.random_range(0.0..side));
            // The rasterizer marks a pixel iff its centre is inside the disk,
            // so the oracle tests the centre of the pixel containing p.
            let (px, py) = (p.x.floor() + 0.5, p.y.floor() + 0.5);
            let oracle = ((px - c).powi(2) + (py - c).powi(2) <= r * r) as u8;
            assert_eq!(inside_glomerulus(p, std::slice::from_ref(&disk)), oracle);
        }
    }

    fn blob_channel(blobs: &[(usize, usize, usize)], w: usize, h: usize, value: u8) -> GrayImage {
        // Each blob is (x0, y0, pixel_count) drawn as a horizontal-ish strip.
        let mut img = GrayImage::new(w, h);
        for &(x0, y0, count) in blobs {
            let mut left = count;
            let mut y = y0;
            while left > 0 {
                let row = left.min(25);
                for x in x0..x0 + row {
                    img.set(x, y, value);
                }
                left -= row;
                y += 1;
            }
        }
        img
    }

    #[test]
    fn contour_segment_blank_raster() {
        let img = GrayImage::new(32, 32);
        let meta = RasterMeta {
            origin_um: [0.0, 0.0],
            resolution_um_per_px: 1.0,
        };
        assert!(contour_segment(&img, meta, 60, 40).is_empty());
    }

    #[test]
    fn contour_segment_area_threshold_at_operating_point() {
        // Two 100-px blobs at intensity 200: both below the 160-px threshold.
        let img = blob_channel(&[(2, 2, 100), (60, 40, 100)], 100, 100, 200);
        let meta = RasterMeta {
            origin_um: [0.0, 0.0],
            resolution_um_per_px: 0.252,
        };
        assert!(contour_segment(&img, meta, 60, 160).is_empty());
    }

    #[test]
    fn contour_segment_keeps_exactly_large_blobs() {
        let img = blob_channel(
            &[(2, 2, 50), (2, 20, 150), (2, 40, 170), (2, 60, 200), (60, 2, 300)],
            120,
            120,
            200,
        );
        let meta = RasterMeta {
            origin_um: [0.0, 0.0],
            resolution_um_per_px: 1.0,
        };
        let masks = contour_segment(&img, meta, 60, 160);
        assert_eq!(masks.len(), 3);
        let mut sizes: Vec<usize> = masks.iter().map(|m| m.pixel_count()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![170, 200, 300]);
    }

    #[test]
    fn contour_segment_outputs_disjoint_masks() {
        let img = blob_channel(&[(2, 2, 180), (40, 40, 260)], 100, 100, 120);
        let meta = RasterMeta {
            origin_um: [0.0, 0.0],
            resolution_um_per_px: 1.0,
        };
        let masks = contour_segment(&img, meta, 60, 160);
        assert_eq!(masks.len(), 2);
        let total: usize = masks.iter().map(|m| m.pixel_count()).sum();
        assert_eq!(total, 180 + 260);
        for m in &masks {
            assert!(m.pixel_count() >= 160);
        }
    }

    #[test]
    fn min_max_scale_basics() {
        let m = ndarray::arr2(&[[2.0, 7.0], [4.0, 7.0], [6.0, 7.0]]);
        let (scaled, params) = min_max_scale(&m, &[0, 1, 2]).unwrap();
        assert_eq!(scaled.column(0).to_vec(), vec![0.0, 0.5, 1.0]);
        // Constant column maps to zero everywhere.
        assert_eq!(scaled.column(1).to_vec(), vec![0.0, 0.0, 0.0]);
        let back = params.inverse(&scaled);
        for r in 0..3 {
            assert_abs_diff_eq!(back[[r, 0]], m[[r, 0]], epsilon = 1e-9);
        }
    }

    #[test]
    fn min_max_scale_fit_subset_allows_out_of_range() {
        let m = ndarray::arr2(&[[1.0], [3.0], [10.0]]);
        let params = ScaleParams::fit(&m, &[0, 1]).unwrap();
        let scaled = params.transform(&m);
        assert_abs_diff_eq!(scaled[[2, 0]], 4.5, epsilon = 1e-12); // unclipped
    }

    #[test]
    fn min_max_scale_requires_fit_rows() {
        let m = ndarray::arr2(&[[1.0], [2.0]]);
        assert!(matches!(
            ScaleParams::fit(&m, &[]),
            Err(MorphologyError::NoFitRows)
        ));
    }

    #[test]
    fn feature_vector_lengths() {
        let mask = disk_mask(8.0, 1.0);
        let gray = GrayImage {
            width: mask.width,
            height: mask.height,
            data: (0..mask.width * mask.height).map(|i| (i % 200) as u8).collect(),
        };
        assert_eq!(glom_feature_vector(&mask, &gray).unwrap().len(), GLOM_FEATURES);
        assert_eq!(cell_feature_vector(&mask, &[]).len(), CELL_FEATURES);
    }
}
