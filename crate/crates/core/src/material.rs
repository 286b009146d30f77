//! Multi-channel material stacks assembled from per-map image files.
//!
//! A stack is stored channel-first as an `(n, H, W)` array of values in
//! `[0, 1]`; the [`ChannelLayout`] records which role owns which planes.
//! Normal maps are kept as raw `[0, 1]` planes.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use indexmap::IndexMap;
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::TripletIndex;

/// Ordered list of `(role, channel count)` entries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    entries: Vec<(String, usize)>,
}

impl ChannelLayout {
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let entries: Vec<(String, usize)> = entries.into_iter().map(|(r, c)| (r.into(), c)).collect();
        if entries.is_empty() {
            return Err(Error::Layout("layout has no roles".into()));
        }
        for (i, (role, count)) in entries.iter().enumerate() {
            if role.is_empty() {
                return Err(Error::Layout("empty role name".into()));
            }
            if !matches!(count, 1 | 3) {
                return Err(Error::Layout(format!(
                    "role {role} has {count} channels; must be 1 or 3"
                )));
            }
            if entries[..i].iter().any(|(r, _)| r == role) {
                return Err(Error::Layout(format!("duplicate role {role}")));
            }
        }
        Ok(Self { entries })
    }

    /// One single-channel role per plane, named `c0`, `c1`, ...
    pub fn anonymous(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| (format!("c{i}"), 1)))
    }

    /// albedo(3), normal(3), roughness, metalness, ao: 9 planes.
    pub fn pbr() -> Self {
        Self::new([
            ("albedo", 3),
            ("normal", 3),
            ("roughness", 1),
            ("metalness", 1),
            ("ao", 1),
        ])
        .expect("static layout is valid")
    }

    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }

    pub fn total_channels(&self) -> usize {
        self.entries.iter().map(|(_, c)| c).sum()
    }

    /// First plane index and channel count of a role.
    pub fn role_range(&self, role: &str) -> Option<(usize, usize)> {
        let mut start = 0;
        for (r, c) in &self.entries {
            if r == role {
                return Some((start, *c));
            }
            start += c;
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaterialStack {
    data: Array3<f64>,
    layout: ChannelLayout,
}

impl MaterialStack {
    /// `data` is `(n, H, W)` with every value finite and in `[0, 1]`.
    pub fn new(data: Array3<f64>, layout: ChannelLayout) -> Result<Self> {
        let (n, h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::Stack(format!("empty spatial extent {h}x{w}")));
        }
        if n != layout.total_channels() {
            return Err(Error::Stack(format!(
                "{n} planes but layout describes {}",
                layout.total_channels()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Stack(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            layout,
        })
    }

    /// Stack with an anonymous single-channel-per-role layout.
    pub fn from_planes(data: Array3<f64>) -> Result<Self> {
        let layout = ChannelLayout::anonymous(data.dim().0)?;
        Self::new(data, layout)
    }

    /// Clamps into `[0, 1]` instead of rejecting; NaN still errors.
    pub fn from_unclamped(mut data: Array3<f64>, layout: ChannelLayout) -> Result<Self> {
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("material stack"));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(data, layout)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn layout(&self) -> &ChannelLayout {
        &self.layout
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn plane(&self, c: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), c)
    }

    /// Channel-gather into a pseudo-RGB `(3, H, W)` image.
    pub fn apply_triplet(&self, t: TripletIndex) -> Result<Array3<f64>> {
        apply_triplet(&self.data, t)
    }

    /// Per-channel mean.
    pub fn channel_means(&self) -> Vec<f64> {
        self.data.axis_iter(Axis(0)).map(|p| p.sum() / p.len() as f64).collect()
    }

    /// Window `[top, top + h) × [left, left + w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height() || left + w > self.width() || h == 0 || w == 0 {
            return Err(Error::Stack(format!(
                "crop {h}x{w} at ({top}, {left}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        let data = self
            .data
            .slice(ndarray::s![.., top..top + h, left..left + w])
            .to_owned();
        Ok(Self {
            data,
            layout: self.layout.clone(),
        })
    }
}

/// Gather planes `t` from an `(n, H, W)` array.
pub fn apply_triplet(data: &Array3<f64>, t: TripletIndex) -> Result<Array3<f64>> {
    let n = data.dim().0;
    let idx = t.channels();
    if let Some(&bad) = idx.iter().find(|&&c| c >= n) {
        return Err(Error::ChannelIndex {
            index: bad,
            channels: n,
        });
    }
    Ok(data.select(Axis(0), &idx))
}

/// One entry of a manifest's `maps` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub path: PathBuf,
    pub channels: usize,
}

/// Per-role map files plus output settings. Serialized as TOML:
///
/// ```toml
/// output_dir = "out"
/// bit_depth = 8
/// size = [256, 256]          # optional [H, W]; maps are resampled bilinearly
///
/// [maps]
/// albedo = { path = "albedo.png", channels = 3 }
/// roughness = { path = "roughness.png", channels = 1 }
/// ```
///
/// Relative paths are resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialManifest {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_bit_depth")]
    pub bit_depth: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[usize; 2]>,
    pub maps: IndexMap<String, MapEntry>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_bit_depth() -> u8 {
    8
}

impl MaterialManifest {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut manifest: MaterialManifest =
            toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        for entry in manifest.maps.values_mut() {
            if entry.path.is_relative() {
                entry.path = base_dir.join(&entry.path);
            }
        }
        if manifest.output_dir.is_relative() {
            manifest.output_dir = base_dir.join(&manifest.output_dir);
        }
        manifest.layout()?;
        Ok(manifest)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn layout(&self) -> Result<ChannelLayout> {
        ChannelLayout::new(self.maps.iter().map(|(r, e)| (r.clone(), e.channels)))
    }

    /// Manifest for writing `layout` as `<role>.png` files under `output_dir`.
    pub fn for_output(layout: &ChannelLayout, output_dir: impl Into<PathBuf>, bit_depth: u8) -> Self {
        let maps = layout
            .entries()
            .iter()
            .map(|(role, c)| {
                (
                    role.clone(),
                    MapEntry {
                        path: PathBuf::from(format!("{role}.png")),
                        channels: *c,
                    },
                )
            })
            .collect();
        Self {
            output_dir: output_dir.into(),
            bit_depth,
            size: None,
            maps,
        }
    }
}

struct Planes {
    planes: Vec<Array2<f64>>,
}

fn decode(path: &Path) -> Result<Planes> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let to_planes = |raw: &[f64], stride: usize, count: usize| -> Vec<Array2<f64>> {
        (0..count)
            .map(|c| Array2::from_shape_fn((h, w), |(i, j)| raw[(i * w + j) * stride + c]))
            .collect()
    };
    let planes = match &img {
        DynamicImage::ImageLuma8(b) => to_planes(&scale8(b.as_raw()), 1, 1),
        DynamicImage::ImageLumaA8(b) => to_planes(&scale8(b.as_raw()), 2, 1),
        DynamicImage::ImageRgb8(b) => to_planes(&scale8(b.as_raw()), 3, 3),
        DynamicImage::ImageRgba8(b) => to_planes(&scale8(b.as_raw()), 4, 3),
        DynamicImage::ImageLuma16(b) => to_planes(&scale16(b.as_raw()), 1, 1),
        DynamicImage::ImageLumaA16(b) => to_planes(&scale16(b.as_raw()), 2, 1),
        DynamicImage::ImageRgb16(b) => to_planes(&scale16(b.as_raw()), 3, 3),
        DynamicImage::ImageRgba16(b) => to_planes(&scale16(b.as_raw()), 4, 3),
        other => {
            return Err(Error::BitDepth(format!(
                "{}: {:?} (only 8 and 16-bit integer images are supported)",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(Planes { planes })
}

fn scale8(raw: &[u8]) -> Vec<f64> {
    raw.iter().map(|&v| f64::from(v) / 255.0).collect()
}

fn scale16(raw: &[u16]) -> Vec<f64> {
    raw.iter().map(|&v| f64::from(v) / 65535.0).collect()
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resample_bilinear(plane: ArrayView2<'_, f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    if (h, w) == (height, width) {
        return plane.to_owned();
    }
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let coord = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    Array2::from_shape_fn((height, width), |(i, j)| {
        let (y0, y1, fy) = coord(i, sy, h);
        let (x0, x1, fx) = coord(j, sx, w);
        let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
        let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Reads every map of the manifest into one stack, in manifest order.
pub fn load_material(manifest: &MaterialManifest) -> Result<MaterialStack> {
    let layout = manifest.layout()?;
    let mut planes: Vec<Array2<f64>> = Vec::with_capacity(layout.total_channels());
    let mut reference: Option<(String, usize, usize)> = None;
    for (role, entry) in &manifest.maps {
        let mut decoded = decode(&entry.path)?.planes;
        match (entry.channels, decoded.len()) {
            (1, 3) => {
                log::warn!(
                    "{}: 3-channel file for 1-channel role {role}; using the first plane",
                    entry.path.display()
                );
                decoded.truncate(1);
            }
            (want, have) if want == have => {}
            (want, have) => {
                return Err(Error::Image {
                    path: entry.path.clone(),
                    message: format!("role {role} expects {want} channels, file has {have}"),
                })
            }
        }
        let (h, w) = decoded[0].dim();
        match manifest.size {
            Some([th, tw]) => {
                if th == 0 || tw == 0 {
                    return Err(Error::Config(format!("target size {th}x{tw} is empty")));
                }
                for p in &mut decoded {
                    *p = resample_bilinear(p.view(), th, tw);
                }
            }
            None => match &reference {
                None => reference = Some((role.clone(), h, w)),
                Some((_, rh, rw)) if (*rh, *rw) != (h, w) => {
                    return Err(Error::SizeMismatch {
                        role: role.clone(),
                        expected_h: *rh,
                        expected_w: *rw,
                        found_h: h,
                        found_w: w,
                    })
                }
                Some(_) => {}
            },
        }
        planes.extend(decoded);
    }
    let views: Vec<_> = planes.iter().map(|p| p.view().insert_axis(Axis(0))).collect();
    let data = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Stack(e.to_string()))?;
    MaterialStack::new(data.mapv(|v| v.clamp(0.0, 1.0)), layout)
}

/// Quantize a unit value to `levels` (255 or 65535) with clamping and round-half-up.
pub fn quantize(v: f64, levels: f64) -> f64 {
    (v.clamp(0.0, 1.0) * levels + 0.5).floor()
}

/// Writes one image file per role into `manifest.output_dir`. Returns the written paths.
pub fn save_material(stack: &MaterialStack, manifest: &MaterialManifest) -> Result<Vec<PathBuf>> {
    let layout = manifest.layout()?;
    if &layout != stack.layout() {
        return Err(Error::Layout(format!(
            "stack layout {:?} does not match manifest {:?}",
            stack.layout().entries(),
            layout.entries()
        )));
    }
    if !matches!(manifest.bit_depth, 8 | 16) {
        return Err(Error::BitDepth(format!("{} (use 8 or 16)", manifest.bit_depth)));
    }
    fs::create_dir_all(&manifest.output_dir)?;
    let (h, w) = (stack.height(), stack.width());
    let mut written = Vec::new();
    let mut start = 0;
    for (role, entry) in &manifest.maps {
        let path = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            manifest.output_dir.join(&entry.path)
        };
        let c = entry.channels;
        let planes: Vec<ArrayView2<'_, f64>> = (start..start + c).map(|i| stack.plane(i)).collect();
        let values = |levels: f64| -> Vec<f64> {
            let mut out = Vec::with_capacity(h * w * c);
            for i in 0..h {
                for j in 0..w {
                    out.extend(planes.iter().map(|p| quantize(p[[i, j]], levels)));
                }
            }
            out
        };
        let (wu, hu) = (w as u32, h as u32);
        let result = match (manifest.bit_depth, c) {
            (8, 1) => ImageBuffer::<Luma<u8>, _>::from_raw(
                wu,
                hu,
                values(255.0).into_iter().map(|v| v as u8).collect::<Vec<_>>(),
            )
            .expect("buffer size")
            .save(&path),
            (8, _) => ImageBuffer::<Rgb<u8>, _>::from_raw(
                wu,
                hu,
                values(255.0).into_iter().map(|v| v as u8).collect::<Vec<_>>(),
            )
            .expect("buffer size")
            .save(&path),
            (_, 1) => ImageBuffer::<Luma<u16>, _>::from_raw(
                wu,
                hu,
                values(65535.0).into_iter().map(|v| v as u16).collect::<Vec<_>>(),
            )
            .expect("buffer size")
            .save(&path),
            (_, _) => ImageBuffer::<Rgb<u16>, _>::from_raw(
                wu,
                hu,
                values(65535.0).into_iter().map(|v| v as u16).collect::<Vec<_>>(),
            )
            .expect("buffer size")
            .save(&path),
        };
        result.map_err(|e| Error::Image {
            path: path.clone(),
            message: format!("cannot write {role}: {e}"),
        })?;
        written.push(path);
        start += c;
    }
    Ok(written)
}

/// Manifest pointing at files previously written by [`save_material`].
pub fn saved_manifest(manifest: &MaterialManifest) -> MaterialManifest {
    let mut out = manifest.clone();
    for entry in out.maps.values_mut() {
        if entry.path.is_relative() {
            entry.path = manifest.output_dir.join(&entry.path);
        }
    }
    out.size = None;
    out
}
