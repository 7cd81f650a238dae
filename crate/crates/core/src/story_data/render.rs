//! Glyph roster, scene catalog and the deterministic 32x32 renderer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{Real, Tensor};

pub const FRAME_SIZE: usize = 32;
const CELL: usize = 10;
const GLYPH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphShape {
    Square,
    Disk,
    Triangle,
    Diamond,
    Plus,
    Ring,
    Cross,
    Stripes,
    Checker,
}

impl GlyphShape {
    const ALL: [GlyphShape; 9] = [
        Self::Square,
        Self::Disk,
        Self::Triangle,
        Self::Diamond,
        Self::Plus,
        Self::Ring,
        Self::Cross,
        Self::Stripes,
        Self::Checker,
    ];

    /// Whether glyph-local pixel `(x, y)` in `0..8` is inked.
    pub fn covers(self, x: usize, y: usize) -> bool {
        let (xi, yi) = (x as i32, y as i32);
        match self {
            Self::Square => (1..7).contains(&xi) && (1..7).contains(&yi),
            Self::Disk => {
                let (dx, dy) = (2 * xi - 7, 2 * yi - 7);
                dx * dx + dy * dy <= 49
            }
            Self::Triangle => yi >= 1 && (2 * xi - 7).abs() <= yi,
            Self::Diamond => (2 * xi - 7).abs() + (2 * yi - 7).abs() <= 8,
            Self::Plus => (3..5).contains(&xi) || (3..5).contains(&yi),
            Self::Ring => !((2..6).contains(&xi) && (2..6).contains(&yi)),
            Self::Cross => (xi - yi).abs() <= 1 || (xi + yi - 7).abs() <= 1,
            Self::Stripes => yi % 3 != 2,
            Self::Checker => ((xi / 2) + (yi / 2)) % 2 == 0,
        }
    }
}

/// One roster entry: a named glyph with a fixed home cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterSpec {
    pub id: usize,
    pub name: String,
    pub shape: GlyphShape,
    pub color: [u8; 3],
    /// Row-major index into the 3x3 layout grid.
    pub cell: usize,
}

/// A background template: sky over ground split at `horizon`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: usize,
    pub name: String,
    pub sky: [u8; 3],
    pub ground: [u8; 3],
    pub horizon: usize,
}

const NAMES: [&str; 9] = ["pip", "rox", "tam", "kai", "lulu", "zed", "moe", "nia", "oz"];
const COLORS: [[u8; 3]; 9] = [
    [220, 30, 30],
    [250, 220, 0],
    [30, 60, 220],
    [220, 0, 200],
    [255, 140, 0],
    [120, 0, 180],
    [0, 0, 0],
    [0, 220, 220],
    [255, 150, 200],
];

pub fn roster(size: usize) -> Result<Vec<CharacterSpec>> {
    if size == 0 || size > NAMES.len() {
        return Err(Error::Invalid(format!("roster size must be 1..={}, got {size}", NAMES.len())));
    }
    Ok((0..size)
        .map(|i| CharacterSpec {
            id: i,
            name: NAMES[i].to_string(),
            shape: GlyphShape::ALL[i],
            color: COLORS[i],
            cell: i,
        })
        .collect())
}

pub fn scene_catalog() -> Vec<SceneSpec> {
    let raw: [(&str, [u8; 3], [u8; 3], usize); 6] = [
        ("forest", [170, 200, 170], [34, 100, 34], 14),
        ("beach", [150, 200, 240], [230, 210, 150], 18),
        ("house", [200, 180, 160], [120, 80, 50], 22),
        ("snow", [200, 210, 230], [245, 245, 250], 16),
        ("cave", [60, 50, 60], [100, 90, 80], 12),
        ("field", [240, 220, 180], [150, 190, 60], 20),
    ];
    raw.iter()
        .enumerate()
        .map(|(id, (name, sky, ground, horizon))| SceneSpec {
            id,
            name: name.to_string(),
            sky: *sky,
            ground: *ground,
            horizon: *horizon,
        })
        .collect()
}

/// 8-bit RGB frame, row-major `[y][x][channel]` like the PNG payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pixels: Vec<u8>,
}

impl Image {
    pub fn from_pixels(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != FRAME_SIZE * FRAME_SIZE * 3 {
            return Err(Error::Shape(format!("expected {} bytes of RGB, got {}", FRAME_SIZE * FRAME_SIZE * 3, pixels.len())));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * FRAME_SIZE + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let o = (y * FRAME_SIZE + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&c);
    }

    /// `[3, 32, 32]` tensor with values in `[-1, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let n = FRAME_SIZE * FRAME_SIZE;
        let mut data = vec![T::zero(); 3 * n];
        for (i, px) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = T::lit(px[c] as f64 / 127.5 - 1.0);
            }
        }
        Tensor::from_vec([3, FRAME_SIZE, FRAME_SIZE], data).expect("frame shape")
    }

    /// Inverse of [`Image::to_tensor`]; values are clamped to `[-1, 1]` first.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.shape() != [3, FRAME_SIZE, FRAME_SIZE] {
            return Err(Error::Shape(format!("frame tensor must be [3, 32, 32], got {:?}", t.shape())));
        }
        let n = FRAME_SIZE * FRAME_SIZE;
        let mut pixels = vec![0u8; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                let v = t.data()[c * n + i].f64().clamp(-1.0, 1.0);
                pixels[i * 3 + c] = ((v + 1.0) * 127.5).round() as u8;
            }
        }
        Ok(Self { pixels })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png_rgb(&self.pixels, FRAME_SIZE as u32, FRAME_SIZE as u32)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        if img.width() as usize != FRAME_SIZE || img.height() as usize != FRAME_SIZE {
            return Err(Error::Image(format!("frame is {}x{}, expected 32x32", img.width(), img.height())));
        }
        Self::from_pixels(img.to_rgb8().into_raw())
    }
}

pub fn encode_png_rgb(pixels: &[u8], width: u32, height: u32) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(pixels, width, height, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out)
}

/// Frames side by side with a 2-pixel white gutter.
pub fn contact_sheet(frames: &[Image]) -> Result<Vec<u8>> {
    let gutter = 2;
    let n = frames.len();
    let width = n * FRAME_SIZE + (n.saturating_sub(1)) * gutter;
    let mut px = vec![255u8; width * FRAME_SIZE * 3];
    for (k, f) in frames.iter().enumerate() {
        let x0 = k * (FRAME_SIZE + gutter);
        for y in 0..FRAME_SIZE {
            let src = &f.pixels[y * FRAME_SIZE * 3..(y + 1) * FRAME_SIZE * 3];
            let o = (y * width + x0) * 3;
            px[o..o + FRAME_SIZE * 3].copy_from_slice(src);
        }
    }
    encode_png_rgb(&px, width as u32, FRAME_SIZE as u32)
}

/// Top-left corner of a character's glyph box before jitter.
pub fn cell_origin(cell: usize) -> (usize, usize) {
    (2 + CELL * (cell % 3), 2 + CELL * (cell / 3))
}

/// Band colors marking the action, indexed like the action vocabulary.
pub const ACTION_COLORS: [[u8; 3]; 8] = [
    [255, 255, 255],
    [255, 60, 60],
    [60, 60, 255],
    [40, 200, 40],
    [255, 200, 0],
    [160, 90, 30],
    [255, 0, 255],
    [90, 90, 90],
];

/// Deterministic render of `characters` on `scene`. An action, when given,
/// is drawn as a two-pixel band along the horizon. `pose_seed` jitters each
/// glyph by up to one pixel in each direction.
pub fn render_frame(
    roster: &[CharacterSpec],
    scenes: &[SceneSpec],
    characters: &[usize],
    scene_id: usize,
    action: Option<usize>,
    pose_seed: u64,
) -> Result<Image> {
    let scene = scenes.get(scene_id).ok_or_else(|| Error::Invalid(format!("unknown scene id {scene_id}")))?;
    let band = match action {
        Some(a) => Some(*ACTION_COLORS.get(a).ok_or_else(|| Error::Invalid(format!("unknown action id {a}")))?),
        None => None,
    };
    let mut img = Image { pixels: vec![0; FRAME_SIZE * FRAME_SIZE * 3] };
    for y in 0..FRAME_SIZE {
        let c = match band {
            Some(b) if y + 1 == scene.horizon || y == scene.horizon => b,
            _ if y < scene.horizon => scene.sky,
            _ => scene.ground,
        };
        for x in 0..FRAME_SIZE {
            img.set(x, y, c);
        }
    }
    for &id in characters {
        let ch = roster.get(id).ok_or_else(|| Error::Invalid(format!("unknown character id {id}")))?;
        let mut rng = seeds::rng(pose_seed, "pose", id as u64);
        let dx: i32 = rng.random_range(-1..=1);
        let dy: i32 = rng.random_range(-1..=1);
        let (ox, oy) = cell_origin(ch.cell);
        let (ox, oy) = ((ox as i32 + dx) as usize, (oy as i32 + dy) as usize);
        for gy in 0..GLYPH {
            for gx in 0..GLYPH {
                if ch.shape.covers(gx, gy) {
                    img.set(ox + gx, oy + gy, ch.color);
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_distinct_and_stay_inside_the_frame_margin() {
        let masks: Vec<Vec<bool>> = GlyphShape::ALL
            .iter()
            .map(|s| (0..64).map(|i| s.covers(i % 8, i / 8)).collect())
            .collect();
        for i in 0..masks.len() {
            assert!(masks[i].iter().filter(|&&b| b).count() >= 16, "{:?} too sparse", GlyphShape::ALL[i]);
            for j in 0..i {
                assert_ne!(masks[i], masks[j]);
            }
        }
        // Worst-case jitter keeps row/column 0 and 31 free for the background.
        for cell in 0..9 {
            let (x, y) = cell_origin(cell);
            assert!(x >= 2 && y >= 2 && x + 1 + GLYPH < FRAME_SIZE && y + 1 + GLYPH < FRAME_SIZE);
        }
    }

    #[test]
    fn tensor_conversion_round_trips() {
        let r = roster(9).unwrap();
        let img = render_frame(&r, &scene_catalog(), &[0, 4, 8], 3, Some(2), 11).unwrap();
        let back = Image::from_tensor(&img.to_tensor::<f32>()).unwrap();
        assert_eq!(back, img);
        let png = img.encode_png().unwrap();
        assert_eq!(Image::decode_png(&png).unwrap(), img);
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let r = roster(7).unwrap();
        assert!(render_frame(&r, &scene_catalog(), &[7], 0, None, 0).is_err());
        assert!(render_frame(&r, &scene_catalog(), &[0], 6, None, 0).is_err());
        assert!(render_frame(&r, &scene_catalog(), &[0], 0, Some(8), 0).is_err());
        assert!(roster(10).is_err());
    }
}
