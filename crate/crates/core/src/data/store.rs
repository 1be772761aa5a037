//! On-disk layout: `<root>/<split>/<idx:05>_{a,b,mask}.bt` plus `<idx:05>.json`.

use std::fs;
use std::path::Path;

use super::{BitemporalSample, SampleMeta, Split};
use crate::error::{Error, Result};
use crate::tensor::{read_bt, write_bt};

pub fn save_sample(dir: &Path, idx: usize, sample: &BitemporalSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_bt(&dir.join(format!("{idx:05}_a.bt")), &sample.image_a)?;
    write_bt(&dir.join(format!("{idx:05}_b.bt")), &sample.image_b)?;
    write_bt(&dir.join(format!("{idx:05}_mask.bt")), &sample.mask)?;
    let meta_path = dir.join(format!("{idx:05}.json"));
    let json = serde_json::to_string_pretty(&sample.meta)?;
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))
}

pub fn load_sample(dir: &Path, idx: usize) -> Result<BitemporalSample> {
    let image_a = read_bt(&dir.join(format!("{idx:05}_a.bt")))?;
    let image_b = read_bt(&dir.join(format!("{idx:05}_b.bt")))?;
    let mask = read_bt(&dir.join(format!("{idx:05}_mask.bt")))?;
    let meta_path = dir.join(format!("{idx:05}.json"));
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    let (h, w) = (mask.shape().get(1).copied(), mask.shape().get(2).copied());
    for (name, t, c) in [("a", &image_a, 3), ("b", &image_b, 3), ("mask", &mask, 1)] {
        let s = t.shape();
        if s.len() != 3 || s[0] != c || Some(s[1]) != h || Some(s[2]) != w {
            return Err(Error::Format {
                path: dir.join(format!("{idx:05}_{name}.bt")),
                reason: format!("unexpected shape {s:?}"),
            });
        }
    }
    Ok(BitemporalSample {
        image_a,
        image_b,
        mask,
        meta,
    })
}

pub fn save_split(root: &Path, split: Split, samples: &[BitemporalSample]) -> Result<()> {
    let dir = root.join(split.name());
    for (i, s) in samples.iter().enumerate() {
        save_sample(&dir, i, s)?;
    }
    Ok(())
}

/// Loads `<root>/<split>` in index order; the split size is the count of metadata files.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<BitemporalSample>> {
    let dir = root.join(split.name());
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut n = 0;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if entry.path().extension().is_some_and(|x| x == "json") {
            n += 1;
        }
    }
    (0..n).map(|i| load_sample(&dir, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, DatasetConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = DatasetConfig {
            n_train: 3,
            n_val: 1,
            n_test: 1,
            ..Default::default()
        };
        let samples = generate_split(&cfg, Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_split(dir.path(), Split::Train, &samples).unwrap();
        let back = load_split(dir.path(), Split::Train).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            assert!(a.bit_eq(b));
            assert_eq!(a.meta, b.meta);
        }
    }

    #[test]
    fn corrupt_magic_names_the_file() {
        let cfg = DatasetConfig {
            n_train: 1,
            n_val: 1,
            n_test: 1,
            ..Default::default()
        };
        let samples = generate_split(&cfg, Split::Val).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_split(dir.path(), Split::Val, &samples).unwrap();
        let bad = dir.path().join("val").join("00000_b.bt");
        let mut bytes = fs::read(&bad).unwrap();
        bytes[0] = b'X';
        fs::write(&bad, bytes).unwrap();
        match load_split(dir.path(), Split::Val) {
            Err(Error::Format { path, .. }) => assert_eq!(path, bad),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
