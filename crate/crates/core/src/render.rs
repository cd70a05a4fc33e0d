//! PNG output for activation maps: grayscale and color overlays.

use std::path::Path;
use std::sync::OnceLock;

use image::{GrayImage, Rgb, RgbImage};

use crate::data::GroundTruthMaskSet;
use crate::error::{Error, Result};
use crate::map::ActivationMap;
use crate::metrics::upsample_to_mask;

const COLORMAP_TEXT: &str = include_str!("../resources/colormap.txt");

fn parse_colormap(text: &str) -> Vec<[u8; 3]> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let mut it = l
                .split_whitespace()
                .map(|v| v.parse::<u8>().expect("colormap entry"));
            [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
        })
        .collect()
}

/// The 256-entry jet table.
pub fn colormap() -> &'static [[u8; 3]] {
    static TABLE: OnceLock<Vec<[u8; 3]>> = OnceLock::new();
    TABLE.get_or_init(|| parse_colormap(COLORMAP_TEXT))
}

fn level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Values clamped to `[0, 1]` and scaled to 8 bits.
pub fn grayscale(map: &ActivationMap) -> GrayImage {
    let pixels = map.values().iter().map(|v| level(*v)).collect();
    GrayImage::from_raw(map.width() as u32, map.height() as u32, pixels)
        .expect("buffer matches shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayOptions {
    /// Output `(height, width)`; the map is upsampled bilinearly.
    pub size: (usize, usize),
    /// Heatmap weight in the blend.
    pub opacity: f64,
    pub contour_color: [u8; 3],
}

impl Default for OverlayOptions {
    fn default() -> Self {
        Self {
            size: (0, 0),
            opacity: 0.5,
            contour_color: [255, 255, 255],
        }
    }
}

/// Colorized heatmap blended over `background`, with optional mask outlines.
pub fn overlay(
    map: &ActivationMap,
    background: Option<&RgbImage>,
    masks: Option<&GroundTruthMaskSet>,
    opts: &OverlayOptions,
) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&opts.opacity) {
        return Err(Error::InvalidParameter(format!(
            "opacity {} outside [0, 1]",
            opts.opacity
        )));
    }
    let (h, w) = match (opts.size, background, masks) {
        ((0, 0), Some(bg), _) => (bg.height() as usize, bg.width() as usize),
        ((0, 0), None, Some(m)) => m.image_size(),
        ((0, 0), None, None) => map.shape(),
        (s, _, _) => s,
    };
    if let Some(bg) = background {
        if (bg.height() as usize, bg.width() as usize) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "background is {}x{}, overlay is {h}x{w}",
                bg.height(),
                bg.width()
            )));
        }
    }
    let up = upsample_to_mask(map, (h, w))?;
    let table = colormap();
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, v) in up.values().iter().enumerate() {
        let (x, y) = ((i % w) as u32, (i / w) as u32);
        let heat = table[level(*v) as usize];
        let base = background.map_or([0, 0, 0], |bg| bg.get_pixel(x, y).0);
        let mix = |c: usize| {
            (opts.opacity * heat[c] as f64 + (1.0 - opts.opacity) * base[c] as f64).round() as u8
        };
        img.put_pixel(x, y, Rgb([mix(0), mix(1), mix(2)]));
    }
    if let Some(set) = masks {
        if set.image_size() != (h, w) {
            return Err(Error::ShapeMismatch(
                "mask size differs from overlay size".into(),
            ));
        }
        for m in set.masks() {
            for (i, _) in contour(&m.mask, h, w)
                .iter()
                .enumerate()
                .filter(|(_, c)| **c)
            {
                img.put_pixel((i % w) as u32, (i / w) as u32, Rgb(opts.contour_color));
            }
        }
    }
    Ok(img)
}

/// Foreground pixels with at least one 4-neighbour outside the mask or the
/// image.
pub fn contour(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            mask[i]
                && (r == 0
                    || c == 0
                    || r + 1 == h
                    || c + 1 == w
                    || !mask[i - w]
                    || !mask[i + w]
                    || !mask[i - 1]
                    || !mask[i + 1])
        })
        .collect()
}

pub fn write_grayscale(path: &Path, map: &ActivationMap) -> Result<()> {
    grayscale(map).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn write_overlay(
    path: &Path,
    map: &ActivationMap,
    background: Option<&RgbImage>,
    masks: Option<&GroundTruthMaskSet>,
    opts: &OverlayOptions,
) -> Result<()> {
    overlay(map, background, masks, opts)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClassMask;

    #[test]
    fn colormap_has_256_entries() {
        let t = colormap();
        assert_eq!(t.len(), 256);
        assert_eq!(t[0], [0, 0, 128]);
        assert!(t[255][0] > 100 && t[255][2] == 0);
    }

    #[test]
    fn grayscale_levels() {
        let m = ActivationMap::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(grayscale(&m).into_raw(), vec![0, 128, 255]);
    }

    #[test]
    fn overlay_blend_and_contours() {
        let m = ActivationMap::filled(2, 2, 1.0);
        let bg = RgbImage::from_pixel(4, 4, Rgb([100, 100, 100]));
        let opts = OverlayOptions {
            opacity: 0.0,
            ..Default::default()
        };
        let img = overlay(&m, Some(&bg), None, &opts).unwrap();
        assert!(img.pixels().all(|p| p.0 == [100, 100, 100]));

        let opts = OverlayOptions {
            opacity: 1.0,
            ..Default::default()
        };
        let mut mask = vec![false; 16];
        for i in [5, 6, 9, 10] {
            mask[i] = true;
        }
        let set = GroundTruthMaskSet::new(
            (4, 4),
            vec![ClassMask {
                class_name: "a".into(),
                mask,
            }],
        )
        .unwrap();
        let img = overlay(&m, Some(&bg), Some(&set), &opts).unwrap();
        assert_eq!(img.get_pixel(1, 1).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(0, 0).0, colormap()[255]);
        assert!(overlay(
            &m,
            None,
            None,
            &OverlayOptions {
                opacity: 2.0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn contour_of_block() {
        let mut mask = vec![true; 25];
        mask[0] = false;
        let c = contour(&mask, 5, 5);
        assert!(!c[12] && c[1] && !c[0] && c[24]);
    }
}
