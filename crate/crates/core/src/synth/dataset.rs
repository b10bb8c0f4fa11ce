use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    generate_sample, sample_seed, validate_label, DegradationRecipe, GrayImage, PlateLayout,
    Profile, ALPHABET,
};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const LABELS_FILE: &str = "labels.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub count: usize,
    pub seed: u64,
    pub profile: Profile,
    pub alphabet: String,
    pub plate_len: usize,
    pub height: usize,
    pub width: usize,
}

/// Samples held in memory, in index order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<GrayImage>,
    pub labels: Vec<String>,
    pub recipes: Vec<DegradationRecipe>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Generates samples `0..count` without touching disk. Images pass through
    /// 8-bit quantization so they equal what `load_dataset` would return.
    pub fn generate(
        count: usize,
        seed: u64,
        profile: Profile,
        layout: &PlateLayout,
    ) -> Result<Self> {
        let mut ds = Dataset::default();
        for i in 0..count {
            let s = generate_sample(sample_seed(seed, i as u64), profile, layout)?;
            ds.images.push(s.image.quantized());
            ds.labels.push(s.label);
            ds.recipes.push(s.recipe);
        }
        Ok(ds)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
            recipes: idx.iter().map(|&i| self.recipes[i]).collect(),
        }
    }
}

pub fn image_file_name(index: usize) -> String {
    format!("{index:06}.pgm")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Refuses to clobber an existing dataset unless `force`; with `force` the old
/// files are removed first so the result matches a fresh run exactly.
fn prepare_dir(out_dir: &Path, force: bool) -> Result<()> {
    let manifest = out_dir.join(MANIFEST_FILE);
    let labels = out_dir.join(LABELS_FILE);
    let images = out_dir.join(IMAGES_DIR);
    if manifest.exists() || labels.exists() || images.exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already holds a dataset; pass --force to overwrite",
                out_dir.display()
            )));
        }
        for f in [&manifest, &labels] {
            if f.exists() {
                fs::remove_file(f).map_err(|e| Error::io(f, e))?;
            }
        }
        if images.exists() {
            fs::remove_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        }
    }
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))
}

pub fn make_dataset(
    count: usize,
    seed: u64,
    profile: Profile,
    layout: &PlateLayout,
    out_dir: &Path,
    force: bool,
) -> Result<Manifest> {
    prepare_dir(out_dir, force)?;
    let images_dir = out_dir.join(IMAGES_DIR);
    let mut tsv = String::new();
    for i in 0..count {
        let s = generate_sample(sample_seed(seed, i as u64), profile, layout)?;
        let name = image_file_name(i);
        write_file(&images_dir.join(&name), &s.image.encode_pgm())?;
        writeln!(
            tsv,
            "{IMAGES_DIR}/{name}\t{}\t{}",
            s.label,
            s.recipe.to_json()
        )
        .expect("string write");
    }
    write_file(&out_dir.join(LABELS_FILE), tsv.as_bytes())?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        count,
        seed,
        profile,
        alphabet: ALPHABET.to_string(),
        plate_len: layout.len,
        height: layout.height,
        width: layout.width,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_file(&out_dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported format version {}",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

/// One parsed row of `labels.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRow {
    pub file: PathBuf,
    pub label: String,
    pub recipe: DegradationRecipe,
}

pub fn parse_labels(text: &str, plate_len: usize) -> Result<Vec<LabelRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let bad = |msg: String| Error::Data(format!("{LABELS_FILE} line {lineno}: {msg}"));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        validate_label(fields[1], plate_len).map_err(|e| bad(e.to_string()))?;
        let recipe = DegradationRecipe::from_json(fields[2]).map_err(|e| bad(e.to_string()))?;
        rows.push(LabelRow {
            file: PathBuf::from(fields[0]),
            label: fields[1].to_string(),
            recipe,
        });
    }
    Ok(rows)
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Dataset)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(LABELS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let rows = parse_labels(&text, manifest.plate_len)?;
    if rows.len() != manifest.count {
        return Err(Error::Data(format!(
            "{} has {} rows but the manifest declares {}",
            path.display(),
            rows.len(),
            manifest.count
        )));
    }
    let mut ds = Dataset::default();
    for row in rows {
        let img = GrayImage::read_pgm(&dir.join(&row.file))?;
        if img.height != manifest.height || img.width != manifest.width {
            return Err(Error::Data(format!(
                "{}: image is {}x{}, expected {}x{}",
                row.file.display(),
                img.height,
                img.width,
                manifest.height,
                manifest.width
            )));
        }
        ds.images.push(img);
        ds.labels.push(row.label);
        ds.recipes.push(row.recipe);
    }
    Ok((manifest, ds))
}
