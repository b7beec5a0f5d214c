//! On-disk dataset handling: grayscale PNG/PGM images, label maps, the
//! displacement-field binary format, and the pair manifest.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{preprocess, preprocess_labels, DisplacementField2D, Image2D, LabelMap2D, PreprocessSpec};
use crate::phantom::RegistrationPair;

pub const FIELD_MAGIC: u32 = 0x4644_4C32; // "2LDF" little-endian tag
pub const FIELD_VERSION: u32 = 1;

/// Save a [0,1] image as 16-bit grayscale (PNG or PGM by extension).
pub fn save_image(path: &Path, img: &Image2D) -> Result<()> {
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        img.width as u32,
        img.height as u32,
    );
    for (x, y, p) in buf.enumerate_pixels_mut() {
        let v = img.get(y as usize, x as usize);
        p.0[0] = (v * 65535.0).round().clamp(0.0, 65535.0) as u16;
    }
    buf.save(path)?;
    Ok(())
}

/// Load a grayscale image (8- or 16-bit PNG/PGM) into [0,1].
pub fn load_image(path: &Path) -> Result<Image2D> {
    let img = image::open(path)?;
    let gray = img.into_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    Ok(Image2D::new(h, w, data))
}

pub fn save_labels(path: &Path, labels: &LabelMap2D) -> Result<()> {
    let mut buf = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::new(
        labels.width as u32,
        labels.height as u32,
    );
    for (x, y, p) in buf.enumerate_pixels_mut() {
        p.0[0] = labels.get(y as usize, x as usize);
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<LabelMap2D> {
    let img = image::open(path)?;
    let gray = img.into_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok(LabelMap2D::new(h, w, gray.into_raw()))
}

/// Write a multi-plane float raster: 8 u32 header values (magic, version,
/// H, W, planes, reserved x3) followed by planes*H*W little-endian f32.
pub fn save_planes(path: &Path, planes: &[&[f64]], h: usize, w: usize) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_u32::<LittleEndian>(FIELD_MAGIC)?;
    f.write_u32::<LittleEndian>(FIELD_VERSION)?;
    f.write_u32::<LittleEndian>(h as u32)?;
    f.write_u32::<LittleEndian>(w as u32)?;
    f.write_u32::<LittleEndian>(planes.len() as u32)?;
    for _ in 0..3 {
        f.write_u32::<LittleEndian>(0)?;
    }
    for plane in planes {
        if plane.len() != h * w {
            return Err(CoreError::shape("save_planes: plane size mismatch"));
        }
        for &v in *plane {
            f.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

pub fn load_planes(path: &Path) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let mut f = fs::File::open(path)?;
    let magic = f.read_u32::<LittleEndian>()?;
    if magic != FIELD_MAGIC {
        return Err(CoreError::data(format!("bad field magic {magic:#x}")));
    }
    let version = f.read_u32::<LittleEndian>()?;
    if version != FIELD_VERSION {
        return Err(CoreError::data(format!("unsupported field version {version}")));
    }
    let h = f.read_u32::<LittleEndian>()? as usize;
    let w = f.read_u32::<LittleEndian>()? as usize;
    let planes = f.read_u32::<LittleEndian>()? as usize;
    for _ in 0..3 {
        f.read_u32::<LittleEndian>()?;
    }
    let mut out = Vec::with_capacity(planes);
    for _ in 0..planes {
        let mut plane = vec![0.0f64; h * w];
        for v in &mut plane {
            *v = f.read_f32::<LittleEndian>()? as f64;
        }
        out.push(plane);
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CoreError::data("trailing bytes in field file"));
    }
    Ok((out, h, w))
}

pub fn save_field(path: &Path, field: &DisplacementField2D) -> Result<()> {
    save_planes(path, &[field.ux(), field.uy()], field.height, field.width)
}

pub fn load_field(path: &Path) -> Result<DisplacementField2D> {
    let (planes, h, w) = load_planes(path)?;
    if planes.len() != 2 {
        return Err(CoreError::data(format!("expected 2 planes, got {}", planes.len())));
    }
    let mut data = planes[0].clone();
    data.extend_from_slice(&planes[1]);
    Ok(DisplacementField2D::new(h, w, data))
}

/// One manifest record; paths are relative to the manifest file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub moving: String,
    pub fixed: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving_labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_labels: Option<String>,
    pub split: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub name: String,
    /// apply the resize/pad/normalize chain on load
    #[serde(default = "default_true")]
    pub preprocess: bool,
    #[serde(default = "default_resize")]
    pub resize_to: usize,
    #[serde(default = "default_pad")]
    pub pad_to: usize,
}

fn default_true() -> bool {
    true
}
fn default_resize() -> usize {
    112
}
fn default_pad() -> usize {
    128
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: ManifestHeader,
    #[serde(default)]
    pub pairs: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut manifest: DatasetManifest = toml::from_str(&text)
            .map_err(|e| CoreError::Config(format!("manifest parse error: {e}")))?;
        manifest.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CoreError::Config(format!("manifest serialize error: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.pairs {
            if !seen.insert(&e.pair_id) {
                return Err(CoreError::Config(format!("duplicate pair_id {}", e.pair_id)));
            }
            if e.moving_labels.is_some() != e.fixed_labels.is_some() {
                return Err(CoreError::Config(format!(
                    "pair {}: label paths must come in pairs",
                    e.pair_id
                )));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> PreprocessSpec {
        PreprocessSpec { resize_to: self.dataset.resize_to, pad_to: self.dataset.pad_to }
    }
}

/// Load and preprocess every pair of one split ("*" for all).
pub fn load_dataset(manifest: &DatasetManifest, split: &str) -> Result<Vec<RegistrationPair>> {
    let spec = manifest.spec();
    let mut out = Vec::new();
    for entry in &manifest.pairs {
        if split != "*" && entry.split != split {
            continue;
        }
        let pair = load_entry(manifest, entry, spec)
            .map_err(|e| CoreError::Data(format!("pair {}: {e}", entry.pair_id)))?;
        out.push(pair);
    }
    Ok(out)
}

fn load_entry(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    spec: PreprocessSpec,
) -> Result<RegistrationPair> {
    let base = &manifest.base_dir;
    let moving_raw = load_image(&base.join(&entry.moving))?;
    let fixed_raw = load_image(&base.join(&entry.fixed))?;
    let (moving, fixed) = if manifest.dataset.preprocess {
        (preprocess(&moving_raw, spec)?, preprocess(&fixed_raw, spec)?)
    } else {
        (moving_raw.clone(), fixed_raw.clone())
    };
    if moving.height != fixed.height || moving.width != fixed.width {
        return Err(CoreError::shape("moving/fixed shape mismatch"));
    }
    let mut moving_labels = None;
    let mut fixed_labels = None;
    if let (Some(ml), Some(fl)) = (&entry.moving_labels, &entry.fixed_labels) {
        let ml_raw = load_labels(&base.join(ml))?;
        let fl_raw = load_labels(&base.join(fl))?;
        if ml_raw.height != moving_raw.height || ml_raw.width != moving_raw.width {
            return Err(CoreError::shape("moving labels do not match image shape"));
        }
        if fl_raw.height != fixed_raw.height || fl_raw.width != fixed_raw.width {
            return Err(CoreError::shape("fixed labels do not match image shape"));
        }
        let (ml2, fl2) = if manifest.dataset.preprocess {
            (preprocess_labels(&ml_raw, spec), preprocess_labels(&fl_raw, spec))
        } else {
            (ml_raw, fl_raw)
        };
        moving_labels = Some(ml2);
        fixed_labels = Some(fl2);
    }
    Ok(RegistrationPair {
        moving,
        fixed,
        moving_labels,
        fixed_labels,
        pair_id: entry.pair_id.clone(),
    })
}

/// Write pairs to `dir` as 16-bit PNGs plus a manifest; returns the manifest
/// path. Generated data is stored at its native size, so loading skips the
/// resize (`preprocess = false` in the header keeps it bit-exact).
pub fn export_dataset(
    dir: &Path,
    name: &str,
    pairs: &[(RegistrationPair, String)],
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (pair, split) in pairs {
        let id = &pair.pair_id;
        let moving = format!("{id}_moving.png");
        let fixed = format!("{id}_fixed.png");
        save_image(&dir.join(&moving), &pair.moving)?;
        save_image(&dir.join(&fixed), &pair.fixed)?;
        let mut entry = ManifestEntry {
            pair_id: id.clone(),
            moving,
            fixed,
            moving_labels: None,
            fixed_labels: None,
            split: split.clone(),
        };
        if let (Some(ml), Some(fl)) = (&pair.moving_labels, &pair.fixed_labels) {
            let mlp = format!("{id}_moving_labels.png");
            let flp = format!("{id}_fixed_labels.png");
            save_labels(&dir.join(&mlp), ml)?;
            save_labels(&dir.join(&flp), fl)?;
            entry.moving_labels = Some(mlp);
            entry.fixed_labels = Some(flp);
        }
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        dataset: ManifestHeader {
            name: name.to_string(),
            preprocess: false,
            resize_to: default_resize(),
            pad_to: default_pad(),
        },
        pairs: entries,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_phantom_pair;

    #[test]
    fn field_binary_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.f32");
        let mut field = DisplacementField2D::zeros(5, 7);
        for (i, v) in field.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin() as f32 as f64; // representable in f32
        }
        save_field(&path, &field).unwrap();
        let loaded = load_field(&path).unwrap();
        assert_eq!(loaded, field);
        // file-level roundtrip is byte-identical
        let bytes1 = std::fs::read(&path).unwrap();
        save_field(&path, &loaded).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn field_loader_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.f32");
        std::fs::write(&path, [0u8; 32]).unwrap();
        assert!(load_field(&path).is_err());
    }

    #[test]
    fn image_png_roundtrip_bit_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = Image2D::new(9, 11, (0..99).map(|i| (i as f64) / 98.0).collect());
        img.quantize_u16();
        save_image(&path, &img).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded, img);
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let mut img = Image2D::new(6, 6, (0..36).map(|i| (i as f64) / 35.0).collect());
        img.quantize_u16();
        save_image(&path, &img).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded, img);
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest {
            dataset: ManifestHeader {
                name: "empty".into(),
                preprocess: true,
                resize_to: 112,
                pad_to: 128,
            },
            pairs: vec![],
            base_dir: dir.path().to_path_buf(),
        };
        let pairs = load_dataset(&manifest, "*").unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn exported_phantom_roundtrips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let pair = generate_phantom_pair(23, 64, 5.0, 12.0, 0.2).unwrap();
        let path =
            export_dataset(dir.path(), "phantom-test", &[(pair.clone(), "test".into())]).unwrap();
        let manifest = DatasetManifest::load(&path).unwrap();
        let loaded = load_dataset(&manifest, "test").unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].moving, pair.moving);
        assert_eq!(loaded[0].fixed, pair.fixed);
        assert_eq!(loaded[0].moving_labels, pair.moving_labels);
        assert_eq!(loaded[0].fixed_labels, pair.fixed_labels);
    }

    #[test]
    fn missing_file_reports_pair_id() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest {
            dataset: ManifestHeader {
                name: "broken".into(),
                preprocess: true,
                resize_to: 112,
                pad_to: 128,
            },
            pairs: vec![ManifestEntry {
                pair_id: "gone".into(),
                moving: "missing_m.png".into(),
                fixed: "missing_f.png".into(),
                moving_labels: None,
                fixed_labels: None,
                split: "train".into(),
            }],
            base_dir: dir.path().to_path_buf(),
        };
        let err = load_dataset(&manifest, "*").unwrap_err();
        assert!(err.to_string().contains("gone"));
    }

    #[test]
    fn duplicate_pair_ids_rejected() {
        let entry = ManifestEntry {
            pair_id: "dup".into(),
            moving: "a.png".into(),
            fixed: "b.png".into(),
            moving_labels: None,
            fixed_labels: None,
            split: "train".into(),
        };
        let manifest = DatasetManifest {
            dataset: ManifestHeader {
                name: "dups".into(),
                preprocess: true,
                resize_to: 112,
                pad_to: 128,
            },
            pairs: vec![entry.clone(), entry],
            base_dir: PathBuf::new(),
        };
        assert!(manifest.validate().is_err());
    }

    #[test]
    fn label_resize_stays_in_label_set() {
        // 224 -> 112 via the manifest path: every output label value appears
        // in the input label set
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image2D::zeros(224, 224);
        for y in 0..224 {
            for x in 0..224 {
                img.set(y, x, ((y + x) % 7) as f64 / 6.0);
            }
        }
        img.quantize_u16();
        let mut labels = LabelMap2D::zeros(224, 224);
        for y in 0..224 {
            for x in 0..224 {
                labels.set(y, x, ((y / 31 + x / 29) % 3) as u8);
            }
        }
        save_image(&dir.path().join("m.png"), &img).unwrap();
        save_image(&dir.path().join("f.png"), &img).unwrap();
        save_labels(&dir.path().join("ml.png"), &labels).unwrap();
        save_labels(&dir.path().join("fl.png"), &labels).unwrap();
        let manifest = DatasetManifest {
            dataset: ManifestHeader {
                name: "resize".into(),
                preprocess: true,
                resize_to: 112,
                pad_to: 128,
            },
            pairs: vec![ManifestEntry {
                pair_id: "p0".into(),
                moving: "m.png".into(),
                fixed: "f.png".into(),
                moving_labels: Some("ml.png".into()),
                fixed_labels: Some("fl.png".into()),
                split: "train".into(),
            }],
            base_dir: dir.path().to_path_buf(),
        };
        let pairs = load_dataset(&manifest, "train").unwrap();
        let out = pairs[0].moving_labels.as_ref().unwrap();
        assert_eq!((out.height, out.width), (128, 128));
        let input_set = labels.label_set();
        for &v in out.data() {
            assert!(v == 0 || input_set.contains(&v));
        }
    }
}
