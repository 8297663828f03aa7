//! Paired-raster on-disk dataset format.
//!
//! ```text
//! root/
//!   train/ | val/ | test/ | test_shifted/
//!     index.txt
//!     <subject_id>/
//!       0.img   raw little-endian f32, height*width values
//!       0.msk   raw u8 class ids, height*width values
//! ```
//!
//! `index.txt` lists `size`, the class table and one `subject <id> <slices>`
//! line per subject. Images are written as f32, so datasets whose pixels are
//! f32-representable round-trip bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::protoseg::MaskTensor;

use super::{Dataset, Slice, SplitId, Subject};

fn dataset_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Dataset { path: path.to_path_buf(), message: message.into() }
}

/// Writes every non-empty split under `root`, creating directories as needed.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    ds.validate()?;
    for split in SplitId::ALL {
        let subjects = ds.split(split);
        if subjects.is_empty() {
            continue;
        }
        let split_dir = root.join(split.dir_name());
        fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;

        let mut index = String::new();
        index.push_str("# paired-raster dataset index\n");
        index.push_str(&format!("size {} {}\n", ds.image_height, ds.image_width));
        for (id, name) in &ds.class_names {
            index.push_str(&format!("class {id} {name}\n"));
        }
        for subject in subjects {
            index.push_str(&format!("subject {} {}\n", subject.id, subject.slices.len()));
        }
        let index_path = split_dir.join("index.txt");
        fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;

        for subject in subjects {
            let subject_dir = split_dir.join(&subject.id);
            fs::create_dir_all(&subject_dir).map_err(|e| Error::io(&subject_dir, e))?;
            for (i, slice) in subject.slices.iter().enumerate() {
                let img_path = subject_dir.join(format!("{i}.img"));
                let mut buf = Vec::with_capacity(slice.image.data().len() * 4);
                for &v in slice.image.data() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
                let mut f = fs::File::create(&img_path).map_err(|e| Error::io(&img_path, e))?;
                f.write_all(&buf).map_err(|e| Error::io(&img_path, e))?;

                let msk_path = subject_dir.join(format!("{i}.msk"));
                fs::write(&msk_path, slice.mask.labels()).map_err(|e| Error::io(&msk_path, e))?;
            }
        }
    }
    Ok(())
}

struct SplitIndex {
    height: usize,
    width: usize,
    classes: Vec<(u8, String)>,
    subjects: Vec<(String, usize)>,
}

fn parse_index(path: &Path) -> Result<SplitIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut size = None;
    let mut classes = Vec::new();
    let mut subjects = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: &str| dataset_err(path, format!("line {}: {what}: '{raw}'", lineno + 1));
        match fields[0] {
            "size" => {
                if fields.len() != 3 {
                    return Err(bad("size needs two values"));
                }
                let h = fields[1].parse().map_err(|_| bad("bad height"))?;
                let w = fields[2].parse().map_err(|_| bad("bad width"))?;
                size = Some((h, w));
            }
            "class" => {
                if fields.len() != 3 {
                    return Err(bad("class needs id and name"));
                }
                let id: u8 = fields[1].parse().map_err(|_| bad("bad class id"))?;
                if id == 0 {
                    return Err(bad("class id 0 is reserved for background"));
                }
                classes.push((id, fields[2].to_string()));
            }
            "subject" => {
                if fields.len() != 3 {
                    return Err(bad("subject needs id and slice count"));
                }
                let n: usize = fields[2].parse().map_err(|_| bad("bad slice count"))?;
                subjects.push((fields[1].to_string(), n));
            }
            _ => return Err(bad("unknown directive")),
        }
    }
    let (height, width) = size.ok_or_else(|| dataset_err(path, "missing size line"))?;
    Ok(SplitIndex { height, width, classes, subjects })
}

fn read_slice(dir: &Path, idx: usize, h: usize, w: usize, declared: &[(u8, String)]) -> Result<Slice> {
    let img_path = dir.join(format!("{idx}.img"));
    let mut bytes = Vec::new();
    fs::File::open(&img_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&img_path, e))?;
    if bytes.len() != h * w * 4 {
        return Err(dataset_err(&img_path, format!("expected {} bytes, found {}", h * w * 4, bytes.len())));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let image = ImageTensor::new(h, w, data).map_err(|e| dataset_err(&img_path, e.to_string()))?;

    let msk_path = dir.join(format!("{idx}.msk"));
    let labels = fs::read(&msk_path).map_err(|e| Error::io(&msk_path, e))?;
    if labels.len() != h * w {
        return Err(dataset_err(&msk_path, format!("expected {} bytes, found {}", h * w, labels.len())));
    }
    for &l in &labels {
        if l != 0 && !declared.iter().any(|(id, _)| *id == l) {
            return Err(dataset_err(&msk_path, format!("mask uses undeclared class {l}")));
        }
    }
    let mask = MaskTensor::new(h, w, labels).map_err(|e| dataset_err(&msk_path, e.to_string()))?;
    Ok(Slice { image, mask })
}

/// Loads a dataset written by [`write_dataset`]. `train` and `test` must be
/// present; `val` and `test_shifted` are optional.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut ds = Dataset::default();
    let mut size_seen: Option<(usize, usize)> = None;
    for split in SplitId::ALL {
        let split_dir = root.join(split.dir_name());
        if !split_dir.is_dir() {
            if matches!(split, SplitId::Train | SplitId::Test) {
                return Err(dataset_err(&split_dir, "required split directory is missing"));
            }
            continue;
        }
        let index = parse_index(&split_dir.join("index.txt"))?;
        match size_seen {
            None => size_seen = Some((index.height, index.width)),
            Some(s) => {
                if s != (index.height, index.width) {
                    return Err(dataset_err(&split_dir, "splits disagree on image size"));
                }
            }
        }
        for (id, name) in &index.classes {
            if let Some(existing) = ds.class_names.get(id) {
                if existing != name {
                    return Err(dataset_err(&split_dir, format!("class {id} renamed across splits")));
                }
            }
            ds.class_names.insert(*id, name.clone());
        }
        for (sid, count) in &index.subjects {
            let dir = split_dir.join(sid);
            let mut slices = Vec::with_capacity(*count);
            for i in 0..*count {
                slices.push(read_slice(&dir, i, index.height, index.width, &index.classes)?);
            }
            ds.split_mut(split).push(Subject { id: sid.clone(), slices });
        }
    }
    let (h, w) = size_seen.ok_or_else(|| dataset_err(root, "no splits found"))?;
    ds.image_height = h;
    ds.image_width = w;
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_synthetic, SynthConfig};
    use super::*;

    fn tiny() -> Dataset {
        generate_synthetic(&SynthConfig {
            image_size: [16, 16],
            train_subjects: 2,
            val_subjects: 1,
            test_subjects: 1,
            slices_per_subject: 2,
            shifted_test_copy: true,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn write_then_load_round_trips_bit_exactly() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn missing_mask_file_is_reported_with_its_path() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join("train").join(&ds.train[0].id).join("0.msk");
        fs::remove_file(&victim).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("0.msk"), "error was: {err}");
    }

    #[test]
    fn truncated_image_file_is_rejected() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join("test").join(&ds.test[0].id).join("1.img");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("expected"), "error was: {err}");
    }

    #[test]
    fn undeclared_class_in_mask_is_rejected() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join("train").join(&ds.train[0].id).join("0.msk");
        let mut labels = fs::read(&victim).unwrap();
        labels[0] = 200;
        fs::write(&victim, labels).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("undeclared class 200"), "error was: {err}");
    }

    #[test]
    fn malformed_index_lines_carry_line_numbers() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let index = dir.path().join("val").join("index.txt");
        let mut text = fs::read_to_string(&index).unwrap();
        text.push_str("garbage directive\n");
        fs::write(&index, &text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line") && msg.contains("unknown directive"), "error was: {msg}");
    }

    #[test]
    fn subject_in_two_splits_is_rejected() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        // Clone a train subject into val by editing the index and copying files.
        let train_id = ds.train[0].id.clone();
        let val_index = dir.path().join("val").join("index.txt");
        let mut text = fs::read_to_string(&val_index).unwrap();
        text.push_str(&format!("subject {train_id} 2\n"));
        fs::write(&val_index, text).unwrap();
        let src = dir.path().join("train").join(&train_id);
        let dst = dir.path().join("val").join(&train_id);
        fs::create_dir_all(&dst).unwrap();
        for i in 0..2 {
            fs::copy(src.join(format!("{i}.img")), dst.join(format!("{i}.img"))).unwrap();
            fs::copy(src.join(format!("{i}.msk")), dst.join(format!("{i}.msk"))).unwrap();
        }
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("more than one"), "error was: {err}");
    }

    #[test]
    fn required_split_must_exist() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing"), "error was: {err}");
    }
}
