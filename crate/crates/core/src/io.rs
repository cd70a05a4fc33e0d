//! Interchange files: NPY arrays, metadata JSON and PNG masks.
//!
//! Arrays are NPY version 1.0, little-endian `float32`, C order. Values are
//! widened to `f64` on read and narrowed on write.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use npyz::WriterBuilder;

use crate::attribution::extract_image_span;
use crate::data::{
    ClassMask, FeatureStack, GradientStack, GroundTruthMaskSet, PlaneStack, SampleMetadata,
    SequenceFeatures,
};
use crate::error::{Error, Result};
use crate::map::ActivationMap;

/// A dense array as read from an NPY file.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn npy_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Npy {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn f4_dtype() -> npyz::DType {
    npyz::DType::Plain("<f4".parse().expect("valid type string"))
}

pub fn read_npy(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_npy(&bytes).map_err(|m| npy_err(path, m))
}

fn decode_npy(bytes: &[u8]) -> std::result::Result<NpyArray, String> {
    let npy = npyz::NpyFile::new(bytes).map_err(|e| e.to_string())?;
    if npy.order() != npyz::Order::C {
        return Err("only C-order arrays are supported".into());
    }
    let shape: Vec<usize> = npy.shape().iter().map(|d| *d as usize).collect();
    let dtype = npy.dtype();
    let data: Vec<f64> = match dtype.descr().as_str() {
        "'<f4'" => npy
            .into_vec::<f32>()
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(f64::from)
            .collect(),
        // Accepted for convenience; everything this crate writes is <f4.
        "'<f8'" => npy.into_vec::<f64>().map_err(|e| e.to_string())?,
        other => return Err(format!("unsupported dtype {other}, expected '<f4'")),
    };
    let expected: usize = shape.iter().product();
    if data.len() != expected {
        return Err(format!("{} values for shape {shape:?}", data.len()));
    }
    Ok(NpyArray { shape, data })
}

/// Encodes `data` as a float32 NPY v1.0 byte buffer.
pub fn encode_npy(shape: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    let dims: Vec<u64> = shape.iter().map(|d| *d as u64).collect();
    let mut buf = Vec::new();
    {
        let mut writer = npyz::WriteOptions::<f32>::new()
            .dtype(f4_dtype())
            .shape(&dims)
            .writer(Cursor::new(&mut buf))
            .begin_nd()?;
        writer.extend(data.iter().map(|v| *v as f32))?;
        writer.finish()?;
    }
    Ok(buf)
}

pub fn write_npy(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let bytes = encode_npy(shape, data)?;
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn read_map(path: &Path) -> Result<ActivationMap> {
    let arr = read_npy(path)?;
    match arr.shape.as_slice() {
        [h, w] => ActivationMap::new(*h, *w, arr.data),
        other => Err(npy_err(
            path,
            format!("expected an (H, W) map, got {other:?}"),
        )),
    }
}

pub fn write_map(path: &Path, map: &ActivationMap) -> Result<()> {
    write_npy(path, &[map.height(), map.width()], map.values())
}

/// Loads a `(D, H, W)` stack, or slices one out of an `(L, D)` sequence with
/// the packing offsets in `meta`.
fn read_stack(path: &Path, meta: &SampleMetadata, step_index: usize) -> Result<PlaneStack> {
    let arr = read_npy(path)?;
    match *arr.shape.as_slice() {
        [d, h, w] => {
            if (h, w) != (meta.grid_h(), meta.grid_w()) {
                return Err(Error::ShapeMismatch(format!(
                    "{}: planes are {h}x{w} but metadata grid is {:?}",
                    path.display(),
                    meta.grid
                )));
            }
            PlaneStack::new(d, h, w, arr.data, step_index)
        }
        [l, d] => {
            let seq = SequenceFeatures::new(l, d, arr.data)?;
            Ok(extract_image_span(&seq, meta, step_index)?.0)
        }
        ref other => Err(npy_err(
            path,
            format!("expected (D, H, W) or (L, D), got {other:?}"),
        )),
    }
}

pub fn read_features(
    path: &Path,
    meta: &SampleMetadata,
    step_index: usize,
) -> Result<FeatureStack> {
    read_stack(path, meta, step_index).map(FeatureStack)
}

pub fn read_gradients(
    path: &Path,
    meta: &SampleMetadata,
    step_index: usize,
) -> Result<GradientStack> {
    read_stack(path, meta, step_index).map(GradientStack)
}

pub fn read_metadata(path: &Path) -> Result<SampleMetadata> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let meta: SampleMetadata = serde_json::from_str(&text)
        .map_err(|e| Error::Metadata(format!("{}: {e}", path.display())))?;
    meta.validate()?;
    Ok(meta)
}

pub fn write_metadata(path: &Path, meta: &SampleMetadata) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}

/// Reads an 8-bit grayscale PNG; any nonzero pixel is object.
pub fn read_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mask = img.pixels().map(|p| p.0[0] != 0).collect();
    Ok((h as usize, w as usize, mask))
}

pub fn write_mask_png(path: &Path, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let pixels = mask.iter().map(|m| if *m { 255u8 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::ShapeMismatch("mask buffer does not fit dimensions".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Resolves `rel` against `base` unless it is already absolute.
pub fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every mask listed in the metadata's mask manifest.
pub fn read_mask_set(meta: &SampleMetadata, mask_dir: &Path) -> Result<GroundTruthMaskSet> {
    let mut size = None;
    let mut masks = Vec::with_capacity(meta.mask_manifest.len());
    for entry in &meta.mask_manifest {
        let path = resolve(mask_dir, &entry.path);
        let (h, w, mask) = read_mask_png(&path)?;
        match size {
            None => size = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(Error::ShapeMismatch(format!(
                    "{}: mask is {h}x{w}, others are {}x{}",
                    path.display(),
                    s.0,
                    s.1
                )))
            }
            Some(_) => {}
        }
        masks.push(ClassMask {
            class_name: entry.class_name.clone(),
            mask,
        });
    }
    let size = size.ok_or(Error::NoMasks)?;
    GroundTruthMaskSet::new(size, masks)
}
