//! Bounding boxes, their rasterization onto attention grids, and the
//! strengthen/weaken masks used to build target maps.

use serde::{Deserialize, Serialize};

use crate::error::{DdError, Result};

/// Default attenuation applied outside a box.
pub const DEFAULT_WEAKEN: f32 = 0.1;
/// Default peak of the injected Gaussian.
pub const DEFAULT_GAUSSIAN_AMPLITUDE: f32 = 1.0;

/// Axis-aligned box in fractions of the image extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RawBox {
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = DdError;

    fn try_from(raw: RawBox) -> Result<Self> {
        BoundingBox::new(raw.left, raw.right, raw.top, raw.bottom)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox {
            left: b.left,
            right: b.right,
            top: b.top,
            bottom: b.bottom,
        }
    }
}

impl BoundingBox {
    pub fn new(left: f64, right: f64, top: f64, bottom: f64) -> Result<Self> {
        for (name, v) in [
            ("left", left),
            ("right", right),
            ("top", top),
            ("bottom", bottom),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DdError::validation(
                    name,
                    format!("must be a fraction in [0, 1], got {v}"),
                ));
            }
        }
        if left >= right {
            return Err(DdError::validation(
                "right",
                format!("must exceed left ({left}), got {right}"),
            ));
        }
        if top >= bottom {
            return Err(DdError::validation(
                "bottom",
                format!("must exceed top ({top}), got {bottom}"),
            ));
        }
        Ok(Self {
            left,
            right,
            top,
            bottom,
        })
    }

    pub const FULL: BoundingBox = BoundingBox {
        left: 0.0,
        right: 1.0,
        top: 0.0,
        bottom: 1.0,
    };

    pub fn left(&self) -> f64 {
        self.left
    }
    pub fn right(&self) -> f64 {
        self.right
    }
    pub fn top(&self) -> f64 {
        self.top
    }
    pub fn bottom(&self) -> f64 {
        self.bottom
    }
    pub fn width(&self) -> f64 {
        self.right - self.left
    }
    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Half-open pixel rectangle covered by this box on an `n x n` grid.
    pub fn pixel_rect(&self, n: usize) -> PixelRect {
        let nf = n as f64;
        let span = |lo: f64, hi: f64| {
            let start = ((lo * nf).floor() as usize).min(n - 1);
            let end = ((hi * nf).ceil() as usize).clamp(start + 1, n);
            (start, end)
        };
        let (x0, x1) = span(self.left, self.right);
        let (y0, y1) = span(self.top, self.bottom);
        PixelRect { x0, x1, y0, y1 }
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

/// A box together with the 1-based prompt token positions it directs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDirective")]
pub struct RegionDirective {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub token_indices: Vec<usize>,
    #[serde(default)]
    pub label: String,
}

#[derive(Deserialize)]
struct RawDirective {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    token_indices: Vec<usize>,
    #[serde(default)]
    label: String,
}

impl TryFrom<RawDirective> for RegionDirective {
    type Error = DdError;

    fn try_from(raw: RawDirective) -> Result<Self> {
        RegionDirective::new(raw.bbox, raw.token_indices, raw.label)
    }
}

impl RegionDirective {
    pub fn new(bbox: BoundingBox, token_indices: Vec<usize>, label: impl Into<String>) -> Result<Self> {
        if token_indices.is_empty() {
            return Err(DdError::validation("token_indices", "must not be empty"));
        }
        if token_indices.contains(&0) {
            return Err(DdError::validation(
                "token_indices",
                "positions are 1-based; 0 is not a valid index",
            ));
        }
        let mut seen = token_indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != token_indices.len() {
            return Err(DdError::validation("token_indices", "must be distinct"));
        }
        Ok(Self {
            bbox,
            token_indices,
            label: label.into(),
        })
    }

    /// Checks every index against the tokenized prompt length `|P|`.
    pub fn validate_for_prompt(&self, prompt_len: usize) -> Result<()> {
        if let Some(&bad) = self.token_indices.iter().find(|&&i| i > prompt_len) {
            return Err(DdError::validation(
                "token_indices",
                format!("index {bad} exceeds the prompt length {prompt_len}"),
            ));
        }
        Ok(())
    }

    /// Zero-based token slots addressed by this directive.
    pub fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.token_indices.iter().map(|&i| i - 1)
    }
}

/// Dense non-negative grid, row-major `[y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl MaskGrid {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(DdError::Shape {
                context: "mask grid",
                expected: format!("{}", width * height),
                actual: values.len().to_string(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(DdError::validation(
                "values",
                format!("mask entries must be finite and non-negative, found {v}"),
            ));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }
    fn set(&mut self, x: usize, y: usize, v: f32) {
        self.values[y * self.width + x] = v;
    }

    /// Number of strictly positive entries.
    pub fn support(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn elementwise_min(&self, other: &MaskGrid) -> MaskGrid {
        self.combine(other, f32::min)
    }

    pub fn elementwise_sum(&self, other: &MaskGrid) -> MaskGrid {
        self.combine(other, |a, b| a + b)
    }

    fn combine(&self, other: &MaskGrid, f: impl Fn(f32, f32) -> f32) -> MaskGrid {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "mask grids must share a resolution"
        );
        MaskGrid {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

fn check_resolution(n: usize) -> Result<()> {
    if n == 0 {
        return Err(DdError::validation("resolution", "must be at least 1"));
    }
    Ok(())
}

/// Indicator grid of the pixels covered by `bbox` at resolution `n`.
pub fn rasterize_box(bbox: &BoundingBox, n: usize) -> Result<MaskGrid> {
    check_resolution(n)?;
    let rect = bbox.pixel_rect(n);
    let mut grid = MaskGrid::filled(n, n, 0.0);
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            grid.set(x, y, 1.0);
        }
    }
    Ok(grid)
}

/// Closed-form separable Gaussian with unit peak at offset `(dx, dy)` from the center.
pub fn gaussian_weight(dx: f64, dy: f64, sigma_x: f64, sigma_y: f64) -> f64 {
    (-(dx * dx) / (2.0 * sigma_x * sigma_x) - (dy * dy) / (2.0 * sigma_y * sigma_y)).exp()
}

/// `b_h x b_w` Gaussian window with `sigma = size / 2` per axis, peak 1 at the
/// continuous center `((b_w - 1) / 2, (b_h - 1) / 2)`.
pub fn gaussian_window(box_width: usize, box_height: usize) -> Result<MaskGrid> {
    if box_width == 0 || box_height == 0 {
        return Err(DdError::validation(
            "window",
            format!("size must be positive, got {box_width}x{box_height}"),
        ));
    }
    let axis = |len: usize| -> Vec<f64> {
        let center = (len as f64 - 1.0) / 2.0;
        let sigma = len as f64 / 2.0;
        (0..len)
            .map(|i| {
                let d = i as f64 - center;
                (-(d * d) / (2.0 * sigma * sigma)).exp()
            })
            .collect()
    };
    let gx = axis(box_width);
    let gy = axis(box_height);
    let values = gy
        .iter()
        .flat_map(|&wy| gx.iter().map(move |&wx| (wx * wy) as f32))
        .collect();
    Ok(MaskGrid {
        width: box_width,
        height: box_height,
        values,
    })
}

/// 1 inside the box, `c` outside.
pub fn weaken_mask(bbox: &BoundingBox, n: usize, c: f32) -> Result<MaskGrid> {
    check_resolution(n)?;
    if !(0.0..=1.0).contains(&c) {
        return Err(DdError::validation(
            "weaken",
            format!("attenuation must lie in [0, 1], got {c}"),
        ));
    }
    let rect = bbox.pixel_rect(n);
    let mut grid = MaskGrid::filled(n, n, c);
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            grid.set(x, y, 1.0);
        }
    }
    Ok(grid)
}

/// `amplitude` times a Gaussian window over the rasterized box, zero elsewhere.
pub fn strengthen_mask(bbox: &BoundingBox, n: usize, amplitude: f32) -> Result<MaskGrid> {
    check_resolution(n)?;
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(DdError::validation(
            "gaussian_amplitude",
            format!("must be finite and non-negative, got {amplitude}"),
        ));
    }
    let rect = bbox.pixel_rect(n);
    let window = gaussian_window(rect.width(), rect.height())?;
    let mut grid = MaskGrid::filled(n, n, 0.0);
    for wy in 0..rect.height() {
        for wx in 0..rect.width() {
            grid.set(rect.x0 + wx, rect.y0 + wy, amplitude * window.get(wx, wy));
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(l: f64, r: f64, t: f64, b: f64) -> BoundingBox {
        BoundingBox::new(l, r, t, b).unwrap()
    }

    #[test]
    fn full_box_covers_everything() {
        let g = rasterize_box(&BoundingBox::FULL, 8).unwrap();
        assert_eq!(g.support(), 64);
    }

    #[test]
    fn bottom_right_quadrant() {
        let g = rasterize_box(&bx(0.5, 1.0, 0.5, 1.0), 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let inside = (4..8).contains(&x) && (4..8).contains(&y);
                assert_eq!(g.get(x, y), if inside { 1.0 } else { 0.0 }, "({x},{y})");
            }
        }
        assert_eq!(g.support(), 16);
    }

    #[test]
    fn zero_width_box_rejected() {
        let err = BoundingBox::new(0.3, 0.3, 0.0, 1.0).unwrap_err();
        assert!(matches!(err, DdError::Validation { ref field, .. } if field == "right"));
        assert!(BoundingBox::new(1.2, 1.3, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 1.0, 0.6, 0.5).is_err());
    }

    #[test]
    fn gaussian_single_sample_and_odd_peak() {
        assert_eq!(gaussian_window(1, 1).unwrap().values(), &[1.0]);
        assert_eq!(gaussian_window(5, 5).unwrap().get(2, 2), 1.0);
        assert!(gaussian_window(0, 3).is_err());
    }

    #[test]
    fn gaussian_corner_is_exp_minus_one() {
        for (w, h) in [(4usize, 4usize), (7, 3), (1, 9)] {
            let v = gaussian_weight(w as f64 / 2.0, h as f64 / 2.0, w as f64 / 2.0, h as f64 / 2.0);
            assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn weaken_examples() {
        let ones = weaken_mask(&bx(0.2, 0.4, 0.2, 0.4), 8, 1.0).unwrap();
        assert!(ones.values().iter().all(|&v| v == 1.0));
        let full = weaken_mask(&BoundingBox::FULL, 8, 0.1).unwrap();
        assert!(full.values().iter().all(|&v| v == 1.0));
        let half = weaken_mask(&bx(0.5, 1.0, 0.0, 1.0), 2, 0.1).unwrap();
        assert_eq!(half.values(), &[0.1, 1.0, 0.1, 1.0]);
        assert!(weaken_mask(&BoundingBox::FULL, 8, 1.5).is_err());
        assert!(weaken_mask(&BoundingBox::FULL, 8, -0.1).is_err());
    }

    #[test]
    fn strengthen_examples() {
        let zero = strengthen_mask(&bx(0.1, 0.6, 0.2, 0.9), 8, 0.0).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
        assert!(strengthen_mask(&BoundingBox::FULL, 8, -1.0).is_err());

        let s = strengthen_mask(&bx(0.5, 1.0, 0.5, 1.0), 8, 1.0).unwrap();
        let w = gaussian_window(4, 4).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expected = if x >= 4 && y >= 4 { w.get(x - 4, y - 4) } else { 0.0 };
                assert_eq!(s.get(x, y), expected);
            }
        }
    }

    #[test]
    fn directive_validation() {
        assert!(RegionDirective::new(BoundingBox::FULL, vec![], "x").is_err());
        assert!(RegionDirective::new(BoundingBox::FULL, vec![2, 2], "x").is_err());
        assert!(RegionDirective::new(BoundingBox::FULL, vec![0], "x").is_err());
        let d = RegionDirective::new(BoundingBox::FULL, vec![2, 3], "bear").unwrap();
        assert!(d.validate_for_prompt(3).is_ok());
        assert!(d.validate_for_prompt(2).is_err());
    }

    #[test]
    fn directive_json_shape() {
        let json = r#"{"box":{"left":0.1,"right":0.5,"top":0.0,"bottom":0.5},"token_indices":[2,3],"label":"bear"}"#;
        let d: RegionDirective = serde_json::from_str(json).unwrap();
        assert_eq!(d.token_indices, vec![2, 3]);
        let back = serde_json::to_string(&d).unwrap();
        assert_eq!(back, json);
        let bad = r#"{"box":{"left":0.6,"right":0.5,"top":0.0,"bottom":0.5},"token_indices":[2]}"#;
        assert!(serde_json::from_str::<RegionDirective>(bad).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0f64..0.99, 0.0f64..0.99, 0.001f64..1.0, 0.001f64..1.0).prop_map(|(l, t, w, h)| {
            let r = (l + w).min(1.0).max(l + 1e-3);
            let b = (t + h).min(1.0).max(t + 1e-3);
            BoundingBox::new(l, r.min(1.0), t, b.min(1.0)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn raster_support_is_bounded_and_matches_strengthen(b in arb_box(), n in 1usize..40) {
            let r = rasterize_box(&b, n).unwrap();
            let support = r.support();
            prop_assert!(support >= 1 && support <= n * n);
            let s = strengthen_mask(&b, n, 1.0).unwrap();
            for (rv, sv) in r.values().iter().zip(s.values()) {
                prop_assert_eq!(*rv > 0.0, *sv > 0.0);
            }
        }

        #[test]
        fn weaken_is_two_valued_and_min_idempotent(b in arb_box(), n in 1usize..40, c in 0.0f32..0.99) {
            let w = weaken_mask(&b, n, c).unwrap();
            prop_assert!(w.values().iter().all(|&v| v == 1.0 || v == c));
            prop_assert_eq!(w.elementwise_min(&w), w.clone());
        }

        #[test]
        fn gaussian_flip_symmetry(w in 1usize..30, h in 1usize..30) {
            let g = gaussian_window(w, h).unwrap();
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(g.get(x, y).to_bits(), g.get(w - 1 - x, y).to_bits());
                    prop_assert_eq!(g.get(x, y).to_bits(), g.get(x, h - 1 - y).to_bits());
                    prop_assert!(g.get(x, y) > 0.0 && g.get(x, y) <= 1.0);
                }
            }
        }

        #[test]
        fn mask_builders_are_pure(b in arb_box(), n in 1usize..20) {
            prop_assert_eq!(strengthen_mask(&b, n, 0.7).unwrap(), strengthen_mask(&b, n, 0.7).unwrap());
            prop_assert_eq!(weaken_mask(&b, n, 0.3).unwrap(), weaken_mask(&b, n, 0.3).unwrap());
        }
    }
}
