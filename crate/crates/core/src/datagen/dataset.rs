use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LabelMap;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub role: String,
    pub dtype: String,
    /// Logical array shape, leading axis is the image index.
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub image_count: usize,
    /// `(c, h, w)`
    pub image_shape: [usize; 3],
    /// `(k, h, w)`
    pub label_shape: [usize; 3],
    pub annotators_per_image: usize,
    pub image_dtype: String,
    pub label_dtype: String,
    pub byte_order: String,
    pub array_order: String,
    pub files: Vec<FileEntry>,
    pub rng_seed: u64,
    /// Echo of the generator configuration.
    pub generator: serde_json::Value,
}

/// One image with all of its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// `(c, h, w)` row-major.
    pub image: Vec<f32>,
    pub labels: Vec<LabelMap>,
}

/// Fully loaded dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    images: Vec<f32>,
    labels: Vec<u8>,
}

fn dtype_size(dtype: &str) -> Option<u64> {
    match dtype {
        "float32" => Some(4),
        "uint8" => Some(1),
        _ => None,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn write_dataset(
    dir: &Path,
    name: &str,
    seed: u64,
    image_shape: [usize; 3],
    label_shape: [usize; 3],
    annotators: usize,
    images: &[f32],
    labels: &[u8],
    generator: serde_json::Value,
) -> Result<DatasetManifest> {
    let img_len: usize = image_shape.iter().product();
    let lab_len: usize = label_shape.iter().product::<usize>() * annotators;
    if annotators == 0 || img_len == 0 || images.len() % img_len != 0 {
        return Err(Error::invalid("inconsistent dataset arrays"));
    }
    let count = images.len() / img_len;
    if labels.len() != count * lab_len {
        return Err(Error::invalid(format!("expected {} label bytes, got {}", count * lab_len, labels.len())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let img_bytes: Vec<u8> = images.iter().flat_map(|v| v.to_le_bytes()).collect();
    let img_path = dir.join(IMAGES_FILE);
    fs::write(&img_path, &img_bytes).map_err(|e| Error::io(&img_path, e))?;
    let lab_path = dir.join(LABELS_FILE);
    fs::write(&lab_path, labels).map_err(|e| Error::io(&lab_path, e))?;

    let mut img_shape = vec![count];
    img_shape.extend(image_shape);
    let mut lab_shape = vec![count, annotators];
    lab_shape.extend(label_shape);
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        name: name.to_string(),
        image_count: count,
        image_shape,
        label_shape,
        annotators_per_image: annotators,
        image_dtype: "float32".into(),
        label_dtype: "uint8".into(),
        byte_order: "little".into(),
        array_order: "C".into(),
        files: vec![
            FileEntry {
                path: IMAGES_FILE.into(),
                role: "images".into(),
                dtype: "float32".into(),
                shape: img_shape,
                offset: 0,
                length: img_bytes.len() as u64,
            },
            FileEntry {
                path: LABELS_FILE.into(),
                role: "labels".into(),
                dtype: "uint8".into(),
                shape: lab_shape,
                offset: 0,
                length: labels.len() as u64,
            },
        ],
        rng_seed: seed,
        generator,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Reads and validates a dataset from its manifest (or its directory).
pub fn dataset_read(path: &Path) -> Result<Dataset> {
    let mpath = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = mpath.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let malformed = |reason: String| Error::MalformedManifest { path: mpath.clone(), reason };
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if manifest.annotators_per_image == 0 {
        return Err(malformed("annotators_per_image must be at least 1".into()));
    }
    if manifest.byte_order != "little" || manifest.array_order != "C" {
        return Err(malformed(format!("unsupported layout {}/{}", manifest.byte_order, manifest.array_order)));
    }
    let mut images = None;
    let mut labels = None;
    for entry in &manifest.files {
        let fpath = root.join(&entry.path);
        let (expected_dtype, per_item) = match entry.role.as_str() {
            "images" => ("float32", manifest.image_shape.iter().product::<usize>()),
            "labels" => (
                "uint8",
                manifest.label_shape.iter().product::<usize>() * manifest.annotators_per_image,
            ),
            other => return Err(malformed(format!("unknown file role {other}"))),
        };
        let declared = if entry.role == "images" { &manifest.image_dtype } else { &manifest.label_dtype };
        if entry.dtype != expected_dtype || declared != expected_dtype {
            let found = if entry.dtype != expected_dtype { &entry.dtype } else { declared };
            return Err(Error::DtypeMismatch { path: fpath, expected: expected_dtype.into(), found: found.clone() });
        }
        let elem = dtype_size(&entry.dtype).expect("known dtype");
        let expected = manifest.image_count as u64 * per_item as u64 * elem;
        let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
        let actual = bytes.len() as u64;
        if actual < entry.offset + expected {
            return Err(Error::Truncated { path: fpath, expected: entry.offset + expected, actual });
        }
        if actual != entry.offset + expected || entry.length != expected {
            return Err(malformed(format!(
                "{} holds {actual} bytes, manifest implies {}",
                entry.path,
                entry.offset + expected
            )));
        }
        let body = &bytes[entry.offset as usize..];
        if entry.role == "images" {
            images = Some(body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect::<Vec<_>>());
        } else {
            labels = Some(body.to_vec());
        }
    }
    let images = images.ok_or_else(|| malformed("no images file listed".into()))?;
    let labels = labels.ok_or_else(|| malformed("no labels file listed".into()))?;
    let ds = Dataset { manifest, root, images, labels };
    // the one-hot invariant is checked eagerly so iteration cannot fail
    for i in 0..ds.len() {
        ds.try_record(i).map_err(|e| malformed(format!("record {i}: {e}")))?;
    }
    Ok(ds)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.image_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_len(&self) -> usize {
        self.manifest.image_shape.iter().product()
    }

    fn try_record(&self, i: usize) -> Result<Record> {
        let il = self.image_len();
        let [k, h, w] = self.manifest.label_shape;
        let ll = k * h * w;
        let a = self.manifest.annotators_per_image;
        let image = self.images[i * il..(i + 1) * il].to_vec();
        let labels = (0..a)
            .map(|r| {
                let s = (i * a + r) * ll;
                LabelMap::new(k, h, w, self.labels[s..s + ll].to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Record { image, labels })
    }

    pub fn record(&self, i: usize) -> Record {
        self.try_record(i).expect("validated at load")
    }

    pub fn iter(&self) -> impl Iterator<Item = Record> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    pub fn raw_images(&self) -> &[f32] {
        &self.images
    }

    pub fn raw_labels(&self) -> &[u8] {
        &self.labels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::markovshapes_generate;

    #[test]
    fn markovshapes_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = markovshapes_generate(dir.path(), 7, 50, 8).unwrap();
        assert_eq!(m.image_shape, [1, 16, 16]);
        assert_eq!(m.label_shape, [2, 16, 16]);
        let ds = dataset_read(dir.path()).unwrap();
        assert_eq!(ds.len(), 50);
        let again = tempfile::tempdir().unwrap();
        write_dataset(again.path(), "markovshapes", 7, [1, 16, 16], [2, 16, 16], 1, ds.raw_images(), ds.raw_labels(), m.generator.clone())
            .unwrap();
        for f in [IMAGES_FILE, LABELS_FILE, MANIFEST_FILE] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f}");
        }
        let r = ds.record(3);
        assert_eq!(r.labels.len(), 1);
        let fg: Vec<f32> = r.labels[0].foreground().iter().map(|&b| b as u8 as f32).collect();
        assert_eq!(fg, r.image);
    }

    #[test]
    fn truncated_file_names_path_and_sizes() {
        let dir = tempfile::tempdir().unwrap();
        markovshapes_generate(dir.path(), 1, 10, 4).unwrap();
        let lp = dir.path().join(LABELS_FILE);
        let bytes = fs::read(&lp).unwrap();
        fs::write(&lp, &bytes[..bytes.len() - 5]).unwrap();
        match dataset_read(dir.path()) {
            Err(Error::Truncated { path, expected, actual }) => {
                assert!(path.ends_with(LABELS_FILE));
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dtype_and_manifest_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        markovshapes_generate(dir.path(), 1, 4, 4).unwrap();
        let mp = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mp).unwrap();
        fs::write(&mp, text.replace("\"image_dtype\": \"float32\"", "\"image_dtype\": \"float64\"")).unwrap();
        assert!(matches!(dataset_read(dir.path()), Err(Error::DtypeMismatch { .. })));
        fs::write(&mp, "{ not json").unwrap();
        assert!(matches!(dataset_read(dir.path()), Err(Error::MalformedManifest { .. })));
        fs::write(&mp, text.replace("\"annotators_per_image\": 1", "\"annotators_per_image\": 0")).unwrap();
        assert!(matches!(dataset_read(dir.path()), Err(Error::MalformedManifest { .. })));
    }
}
