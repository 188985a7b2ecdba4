//! Corpus storage: PNG images, indexed PNG masks, JSON metadata.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CaptionRecord, Corpus, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    name: String,
    object: String,
    label: u8,
    defects: Vec<String>,
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_png(path: &Path, width: usize, height: usize, bytes: &[u8], palette: Option<Vec<u8>>) -> Result<()> {
    create_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_depth(png::BitDepth::Eight);
    match palette {
        Some(p) => {
            enc.set_color(png::ColorType::Indexed);
            enc.set_palette(p);
        }
        None => enc.set_color(png::ColorType::Rgb),
    }
    let mut writer = enc.write_header().map_err(|e| png_error(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_error(path, e))?;
    writer.finish().map_err(|e| png_error(path, e))
}

/// Raw decoded bytes, width, height and color type, with no expansion.
fn read_png(path: &Path) -> Result<(Vec<u8>, usize, usize, png::ColorType)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_error(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_error(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_error(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, info.width as usize, info.height as usize, info.color_type))
}

pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    write_png(path, image.width(), image.height(), &image.to_rgb8(), None)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let (bytes, w, h, color) = read_png(path)?;
    match color {
        png::ColorType::Rgb => Image::from_rgb8(h, w, &bytes),
        png::ColorType::Rgba => {
            let rgb: Vec<u8> = bytes.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
            Image::from_rgb8(h, w, &rgb)
        }
        png::ColorType::Grayscale => {
            let rgb: Vec<u8> = bytes.iter().flat_map(|&v| [v, v, v]).collect();
            Image::from_rgb8(h, w, &rgb)
        }
        other => Err(png_error(path, format!("unsupported color type {other:?}"))),
    }
}

/// Grayscale 8-bit PNG of a `[0, 1]` map.
pub fn save_gray(values: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    let rgb: Vec<u8> = values
        .iter()
        .flat_map(|v| {
            let b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [b, b, b]
        })
        .collect();
    write_png(path, width, height, &rgb, None)
}

/// Distinct palette colors; entry 0 is black.
pub fn mask_palette(entries: usize) -> Vec<u8> {
    const BASE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
    ];
    (0..entries.max(1))
        .flat_map(|i| {
            let c = BASE[i % BASE.len()];
            let dim = (i / BASE.len()) as u8;
            [c[0].saturating_sub(dim * 40), c[1].saturating_sub(dim * 40), c[2].saturating_sub(dim * 40)]
        })
        .collect()
}

/// Indexed PNG whose palette id is the channel index.
pub fn save_mask(labels: &[u8], width: usize, height: usize, channels: usize, path: &Path) -> Result<()> {
    let entries = channels.max(labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1));
    write_png(path, width, height, labels, Some(mask_palette(entries)))
}

pub fn load_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let (bytes, w, h, color) = read_png(path)?;
    match color {
        png::ColorType::Indexed | png::ColorType::Grayscale => Ok((bytes, w, h)),
        other => Err(png_error(path, format!("mask must be indexed, found {other:?}"))),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn image_path(dir: &Path, record: &SampleRecord) -> PathBuf {
    let kind = if record.label == 1 { "defect" } else { "good" };
    dir.join(&record.object).join(kind).join(format!("{}.png", record.name))
}

fn mask_path(dir: &Path, object: &str, name: &str) -> PathBuf {
    dir.join("masks").join(object).join(format!("{name}.png"))
}

fn meta_path(dir: &Path, object: &str, name: &str) -> PathBuf {
    dir.join("meta").join(object).join(format!("{name}.json"))
}

/// Write one record under a split directory.
pub fn save_sample(record: &SampleRecord, dir: &Path, channels: usize) -> Result<()> {
    let (h, w) = (record.image.height(), record.image.width());
    save_image(&record.image, &image_path(dir, record))?;
    save_mask(&record.mask, w, h, channels, &mask_path(dir, &record.object, &record.name))?;
    let meta = SampleMeta {
        name: record.name.clone(),
        object: record.object.clone(),
        label: record.label,
        defects: record.defects.clone(),
    };
    write_json(&meta, &meta_path(dir, &record.object, &record.name))
}

/// Read one record given its image file; mask and metadata are found by name.
pub fn load_sample(dir: &Path, image_file: &Path, channels: usize) -> Result<SampleRecord> {
    let name = image_file
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| png_error(image_file, "file name is not valid UTF-8"))?
        .to_string();
    let object = image_file
        .parent()
        .and_then(Path::parent)
        .and_then(Path::file_name)
        .and_then(|s| s.to_str())
        .ok_or_else(|| png_error(image_file, "expected <object>/<good|defect>/<name>.png"))?
        .to_string();
    let image = load_image(image_file)?;
    let mpath = mask_path(dir, &object, &name);
    let (mask, w, h) = load_mask(&mpath)?;
    if (w, h) != (image.width(), image.height()) {
        return Err(png_error(&mpath, "mask and image sizes differ"));
    }
    let meta: SampleMeta = read_json(&meta_path(dir, &object, &name))?;
    let record = SampleRecord {
        name,
        image,
        mask,
        label: meta.label,
        object,
        defects: meta.defects,
    };
    record.validate(channels)?;
    let folder = image_file.parent().and_then(Path::file_name).and_then(|s| s.to_str());
    let expected = if record.label == 1 { "defect" } else { "good" };
    if folder != Some(expected) {
        return Err(Error::Validation(format!(
            "{}: stored under {folder:?} but labelled {}",
            record.name, record.label
        )));
    }
    Ok(record)
}

pub fn read_defect_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_defect_list(defects: &[String], path: &Path) -> Result<()> {
    create_parent(path)?;
    fs::write(path, defects.join("\n") + "\n").map_err(|e| Error::io(path, e))
}

pub fn save_split(split: &Split, dir: &Path) -> Result<()> {
    write_defect_list(&split.defects, &dir.join("defects.txt"))?;
    for s in &split.samples {
        save_sample(s, dir, split.channels())?;
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Every `*.png` under `<object>/<good|defect>/`, sorted by file name.
pub fn list_split_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for obj in sorted_entries(dir)? {
        let name = obj.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        if !obj.is_dir() || name == "masks" || name == "meta" {
            continue;
        }
        for kind in ["good", "defect"] {
            let sub = obj.join(kind);
            if !sub.is_dir() {
                continue;
            }
            files.extend(
                sorted_entries(&sub)?
                    .into_iter()
                    .filter(|p| p.extension().is_some_and(|e| e == "png")),
            );
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

pub fn load_split(dir: &Path) -> Result<Split> {
    let defects = read_defect_list(&dir.join("defects.txt"))?;
    let channels = defects.len() + 1;
    let samples = list_split_images(dir)?
        .iter()
        .map(|p| load_sample(dir, p, channels))
        .collect::<Result<Vec<_>>>()?;
    let name = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("split")
        .to_string();
    Ok(Split {
        name,
        defects,
        samples,
    })
}

pub fn save_captions(captions: &[CaptionRecord], dir: &Path) -> Result<()> {
    let mut lines = String::new();
    for c in captions {
        save_image(&c.image, &dir.join("images").join(format!("{}.png", c.name)))?;
        lines.push_str(&format!("{}\t{}\n", c.name, c.caption));
    }
    let index = dir.join("captions.tsv");
    create_parent(&index)?;
    fs::write(&index, lines).map_err(|e| Error::io(&index, e))
}

pub fn load_captions(dir: &Path) -> Result<Vec<CaptionRecord>> {
    let index = dir.join("captions.tsv");
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (name, caption) = line
                .split_once('\t')
                .ok_or_else(|| Error::Validation(format!("{}: malformed line '{line}'", index.display())))?;
            Ok(CaptionRecord {
                name: name.to_string(),
                image: load_image(&dir.join("images").join(format!("{name}.png")))?,
                caption: caption.to_string(),
            })
        })
        .collect()
}

/// `root/train`, `root/target` and `root/captions`.
pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    save_split(&corpus.train, &root.join("train"))?;
    save_split(&corpus.target, &root.join("target"))?;
    save_captions(&corpus.captions, &root.join("captions"))
}

pub fn load_corpus(root: &Path) -> Result<Corpus> {
    Ok(Corpus {
        train: load_split(&root.join("train"))?,
        target: load_split(&root.join("target"))?,
        captions: load_captions(&root.join("captions"))?,
    })
}
