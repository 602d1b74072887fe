//! Dataset persistence: the `CFDCKPT1` container, and PGM + CSV directories.

use std::fs;
use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::AttackLabel;
use crate::tensor::{read_checkpoint, write_checkpoint, NamedArray, Tensor};
use crate::util::atomic_write;

/// Writes `images [N, C, H, W]`, `attack [N]` and `ids [N]` arrays.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    atomic_write(path, &dataset_bytes(dataset))
}

pub fn dataset_bytes(d: &Dataset) -> Vec<u8> {
    let n = d.samples.len();
    let mut images = Vec::with_capacity(n * d.channels * d.height * d.width);
    for s in &d.samples {
        images.extend_from_slice(s.image.data());
    }
    write_checkpoint(&[
        NamedArray::new("images", vec![n, d.channels, d.height, d.width], images),
        NamedArray::vector("attack", d.samples.iter().map(|s| f64::from(s.attack.0)).collect()),
        NamedArray::vector("ids", d.samples.iter().map(|s| s.id as f64).collect()),
    ])
}

fn as_index(v: f64, what: &str, i: usize) -> Result<u64> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u64)
    } else {
        Err(Error::Format {
            what: "dataset container",
            pos: i as u64,
            detail: format!("{what} entry {i} is not a nonnegative integer: {v}"),
        })
    }
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let arrays = read_checkpoint(bytes)?;
    let find = |name: &str| {
        arrays.iter().find(|a| a.name == name).ok_or_else(|| Error::Format {
            what: "dataset container",
            pos: 0,
            detail: format!("missing array {name:?}"),
        })
    };
    let images = find("images")?;
    let attack = find("attack")?;
    let ids = find("ids")?;
    let bad = |detail: String| Error::Format {
        what: "dataset container",
        pos: 0,
        detail,
    };
    if images.shape.len() != 4 {
        return Err(bad(format!("images must be rank 4, got {:?}", images.shape)));
    }
    let (n, c, h, w) = (images.shape[0], images.shape[1], images.shape[2], images.shape[3]);
    if attack.values.len() != n || ids.values.len() != n {
        return Err(bad(format!(
            "{n} images but {} labels and {} ids",
            attack.values.len(),
            ids.values.len()
        )));
    }
    let per = c * h * w;
    let samples = (0..n)
        .map(|i| {
            Ok(Sample {
                id: as_index(ids.values[i], "ids", i)?,
                attack: AttackLabel(as_index(attack.values[i], "attack", i)? as u32),
                image: Tensor::new(vec![c, h, w], images.values[i * per..(i + 1) * per].to_vec())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(c, h, w, samples)
}

/// Loads either a container file or a directory with `labels.csv` (`id,attack`)
/// and one `<id>.pgm` per row.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        load_pgm_dir(path)
    } else {
        dataset_from_bytes(&fs::read(path)?)
    }
}

fn load_pgm_dir(dir: &Path) -> Result<Dataset> {
    let csv = fs::read_to_string(dir.join("labels.csv"))?;
    let fail = |line: usize, detail: String| Error::Format {
        what: "labels.csv",
        pos: line as u64,
        detail,
    };
    let mut samples = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (lineno, line) in csv.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() || (lineno == 1 && line.starts_with("id")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(fail(lineno, format!("expected 2 fields, got {}", fields.len())));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|e| fail(lineno, format!("bad id {:?}: {e}", fields[0])))?;
        let attack: u32 = fields[1]
            .parse()
            .map_err(|e| fail(lineno, format!("bad attack label {:?}: {e}", fields[1])))?;
        let (w, h, pixels) = read_pgm(&fs::read(dir.join(format!("{id}.pgm")))?)?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(fail(lineno, format!("image {id} is {w}x{h}, expected {}x{}", d.1, d.0)))
            }
            _ => {}
        }
        samples.push(Sample {
            id,
            attack: AttackLabel(attack),
            image: Tensor::new(vec![1, h, w], pixels)?,
        });
    }
    let (h, w) = dims.ok_or_else(|| fail(0, "no samples listed".into()))?;
    Dataset::new(1, h, w, samples)
}

/// Parses a binary (P5) PGM with maxval <= 255, returning `(width, height,
/// pixels / maxval)`.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0usize;
    let fail = |pos: usize, detail: &str| Error::Format {
        what: "PGM",
        pos: pos as u64,
        detail: detail.to_string(),
    };
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fail(start, "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P5" {
        return Err(fail(0, "not a binary PGM (expected P5)"));
    }
    let num = |pos: &mut usize, what: &str| -> Result<usize> {
        let at = *pos;
        token(pos)?
            .parse::<usize>()
            .map_err(|_| fail(at, &format!("bad {what}")))
    };
    let w = num(&mut pos, "width")?;
    let h = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "maxval")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(fail(pos, "unsupported dimensions or maxval"));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h;
    if bytes.len() < pos + need {
        return Err(fail(bytes.len(), "truncated pixel data"));
    }
    let scale = maxval as f64;
    let pixels = bytes[pos..pos + need]
        .iter()
        .map(|&b| (f64::from(b) / scale).min(1.0))
        .collect();
    Ok((w, h, pixels))
}

/// Encodes values in `[0, 1]` as an 8-bit P5 PGM.
pub fn write_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
