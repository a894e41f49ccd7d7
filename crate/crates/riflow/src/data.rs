//! Image I/O and the synthetic texture corpus.
//!
//! Three on-disk forms are supported: binary netpbm images (`P6` color,
//! `P5` grayscale, 8-bit only) for interchange, a tiny `RIFD` container for
//! batches of identically shaped tensors, and a seeded generator of
//! gradient-plus-noise texture patches used to build training and
//! evaluation corpora without shipping image data.
//!
//! Pixels travel as `f64` arrays in planar `(C, H, W)` layout holding exact
//! integers in `[0, 255]`. Parsers report the byte offset where they gave
//! up.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::{round_half_away_scalar, Array};
use crate::error::{domain_err, shape_err, Error, Result};

/// Magic bytes of the tensor-batch container.
pub const BATCH_MAGIC: [u8; 4] = *b"RIFD";

// ---------------------------------------------------------------------
// netpbm (P6 / P5)
// ---------------------------------------------------------------------

struct PnmParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmParser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        PnmParser { bytes, pos: 0 }
    }

    fn err<T>(&self, what: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            what: what.into(),
            offset: self.pos,
        })
    }

    /// Skips whitespace and `#`-to-newline comments.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err(format!("expected {what}, found end of data"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let start_of_token = {
            self.skip_separators();
            self.pos
        };
        let tok = self.token(what)?;
        let text = std::str::from_utf8(tok).ok();
        match text.and_then(|t| t.parse::<usize>().ok()) {
            Some(v) => Ok(v),
            None => Err(Error::Parse {
                what: format!("{what} is not a decimal integer"),
                offset: start_of_token,
            }),
        }
    }
}

/// Parses a binary netpbm image (`P6` -> 3 channels, `P5` -> 1 channel)
/// into a planar integer tensor. Sample values are kept verbatim; files
/// with `maxval` above 255 (two-byte samples) are rejected.
pub fn read_image(bytes: &[u8]) -> Result<Array> {
    let mut p = PnmParser::new(bytes);
    let magic = p.token("netpbm magic")?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(Error::Parse {
                what: format!(
                    "unsupported magic {:?}; only binary P6/P5 images are readable",
                    String::from_utf8_lossy(other)
                ),
                offset: 0,
            })
        }
    };
    let width = p.number("width")?;
    let height = p.number("height")?;
    let maxval_at = {
        p.skip_separators();
        p.pos
    };
    let maxval = p.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse {
            what: format!("maxval {maxval} unsupported; need 1..=255 single-byte samples"),
            offset: maxval_at,
        });
    }
    if width == 0 || height == 0 {
        return p.err("image dimensions must be positive");
    }
    // Exactly one whitespace byte separates the header from the samples.
    if p.pos >= p.bytes.len() || !p.bytes[p.pos].is_ascii_whitespace() {
        return p.err("expected single whitespace before pixel data");
    }
    p.pos += 1;
    let need = width * height * channels;
    let body = &bytes[p.pos..];
    if body.len() < need {
        return Err(Error::Parse {
            what: format!("pixel data truncated: need {need} bytes, found {}", body.len()),
            offset: bytes.len(),
        });
    }
    if body.len() > need {
        return Err(Error::Parse {
            what: format!("{} trailing bytes after pixel data", body.len() - need),
            offset: p.pos + need,
        });
    }
    // Interleaved rows -> planar channels.
    let mut data = vec![0.0; need];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let v = body[(y * width + x) * channels + c];
                data[c * height * width + y * width + x] = v as f64;
            }
        }
    }
    Array::new(vec![channels, height, width], data)
}

/// Serializes a planar integer tensor as binary netpbm (3 channels -> `P6`,
/// 1 channel -> `P5`, maxval 255).
pub fn write_image(x: &Array) -> Result<Vec<u8>> {
    let (c, h, w) = x.dims3()?;
    let magic = match c {
        3 => "P6",
        1 => "P5",
        other => {
            return Err(shape_err(
                "write_image",
                format!("netpbm holds 1 or 3 channels, tensor has {other}"),
            ))
        }
    };
    if !x.is_integer_valued() || x.data().iter().any(|&v| !(0.0..=255.0).contains(&v)) {
        return Err(domain_err(
            "write_image",
            "pixels must be integers in [0, 255]",
        ));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for xx in 0..w {
            for cc in 0..c {
                out.push(x.data()[cc * h * w + y * w + xx] as u8);
            }
        }
    }
    Ok(out)
}

/// Reads a netpbm image from disk.
pub fn load_image(path: impl AsRef<Path>) -> Result<Array> {
    read_image(&fs::read(path)?)
}

/// Writes a netpbm image to disk.
pub fn save_image(path: impl AsRef<Path>, x: &Array) -> Result<()> {
    fs::write(path, write_image(x)?)?;
    Ok(())
}

// ---------------------------------------------------------------------
// Tensor batches
// ---------------------------------------------------------------------

/// Serializes identically shaped integer tensors: magic, `(N, C, H, W)` as
/// little-endian u32, then the 8-bit samples in array order.
pub fn write_batch(batch: &[Array]) -> Result<Vec<u8>> {
    let first = batch
        .first()
        .ok_or_else(|| domain_err("write_batch", "batch is empty"))?;
    let (c, h, w) = first.dims3()?;
    let mut out = Vec::with_capacity(20 + batch.len() * first.numel());
    out.extend_from_slice(&BATCH_MAGIC);
    for d in [batch.len(), c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in batch {
        if x.shape() != first.shape() {
            return Err(shape_err(
                "write_batch",
                format!("mixed shapes {:?} and {:?}", first.shape(), x.shape()),
            ));
        }
        if !x.is_integer_valued() || x.data().iter().any(|&v| !(0.0..=255.0).contains(&v)) {
            return Err(domain_err("write_batch", "pixels must be integers in [0, 255]"));
        }
        out.extend(x.data().iter().map(|&v| v as u8));
    }
    Ok(out)
}

/// Parses a batch written by [`write_batch`].
pub fn read_batch(bytes: &[u8]) -> Result<Vec<Array>> {
    if bytes.len() < 20 {
        return Err(Error::Parse {
            what: "batch header truncated".to_string(),
            offset: bytes.len(),
        });
    }
    if bytes[0..4] != BATCH_MAGIC {
        return Err(Error::Format {
            what: format!("bad batch magic {:02x?}", &bytes[0..4]),
        });
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("sliced in bounds")) as usize;
    }
    let [n, c, h, w] = dims;
    let per = c * h * w;
    let need = n * per;
    let body = &bytes[20..];
    if body.len() != need {
        return Err(Error::Parse {
            what: format!("batch body holds {} bytes, header promises {need}", body.len()),
            offset: bytes.len(),
        });
    }
    (0..n)
        .map(|i| {
            Array::new(
                vec![c, h, w],
                body[i * per..(i + 1) * per].iter().map(|&b| b as f64).collect(),
            )
        })
        .collect()
}

/// Reads a tensor batch from disk.
pub fn load_batch(path: impl AsRef<Path>) -> Result<Vec<Array>> {
    read_batch(&fs::read(path)?)
}

/// Writes a tensor batch to disk.
pub fn save_batch(path: impl AsRef<Path>, batch: &[Array]) -> Result<()> {
    fs::write(path, write_batch(batch)?)?;
    Ok(())
}

// ---------------------------------------------------------------------
// Synthetic textures
// ---------------------------------------------------------------------

/// Generates texture patch `index` of a corpus: each channel is a linear
/// gradient `a + b*x/W + c*y/H` plus uniform integer noise in `[-q, q]`
/// (noise level `q` drawn once per patch from `0..=8`), rounded and clamped
/// to the pixel range. Every `(seed, index)` pair is an independent
/// deterministic stream, so corpora are reproducible and patches can be
/// materialized in any order.
pub fn synthetic_texture(shape: [usize; 3], seed: u64, index: u64) -> Array {
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let q = rng.gen_range(0..=8i64);
    let mut data = vec![0.0; c * h * w];
    for cc in 0..c {
        let base = rng.gen_range(0.0..256.0);
        let bx = rng.gen_range(-128.0..128.0);
        let by = rng.gen_range(-128.0..128.0);
        for y in 0..h {
            for x in 0..w {
                let smooth = base + bx * x as f64 / w as f64 + by * y as f64 / h as f64;
                let v = round_half_away_scalar(smooth) + rng.gen_range(-q..=q) as f64;
                data[cc * h * w + y * w + x] = v.clamp(0.0, 255.0);
            }
        }
    }
    Array::new(shape.to_vec(), data).expect("sized by construction")
}

/// Materializes `count` texture patches for a corpus seed.
pub fn synthetic_textures(shape: [usize; 3], count: usize, seed: u64) -> Vec<Array> {
    (0..count)
        .map(|i| synthetic_texture(shape, seed, i as u64))
        .collect()
}

// ---------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------

/// Patch count of the builtin corpus when none is requested.
pub const SYNTHETIC_DEFAULT_COUNT: usize = 64;

/// Shape of builtin synthetic patches: 16x16 RGB.
pub const SYNTHETIC_SHAPE: [usize; 3] = [3, 16, 16];

/// Loads a dataset from a builtin name or a filesystem path.
///
/// Accepted forms:
/// * `synthetic-textures`, `synthetic-textures:COUNT`, or
///   `synthetic-textures:COUNT:SEED` — the builtin seeded 16x16 RGB corpus
///   ([`SYNTHETIC_DEFAULT_COUNT`] patches and seed 0 unless overridden), so
///   every experiment can run without any files on disk;
/// * a directory — every `.ppm`/`.pgm` file inside, sorted by file name;
/// * a `RIFD` batch file;
/// * a single PPM/PGM image.
///
/// An empty dataset is an error in every form.
pub fn load_dataset(spec: &str) -> Result<Vec<Array>> {
    if let Some(rest) = spec.strip_prefix("synthetic-textures") {
        let mut count = SYNTHETIC_DEFAULT_COUNT;
        let mut seed = 0u64;
        if !rest.is_empty() {
            let args = rest.strip_prefix(':').ok_or_else(|| {
                domain_err("load_dataset", format!("malformed builtin name: {spec}"))
            })?;
            let mut parts = args.split(':');
            if let Some(c) = parts.next() {
                count = c.parse().map_err(|_| {
                    domain_err("load_dataset", format!("bad patch count in: {spec}"))
                })?;
            }
            if let Some(s) = parts.next() {
                seed = s.parse().map_err(|_| {
                    domain_err("load_dataset", format!("bad seed in: {spec}"))
                })?;
            }
            if parts.next().is_some() {
                return Err(domain_err("load_dataset", format!("too many fields in: {spec}")));
            }
        }
        if count == 0 {
            return Err(domain_err("load_dataset", "builtin corpus needs at least one patch"));
        }
        return Ok(synthetic_textures(SYNTHETIC_SHAPE, count, seed));
    }

    let path = Path::new(spec);
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pgm"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(domain_err("load_dataset", format!("no PPM/PGM images under {spec}")));
        }
        return files.iter().map(load_image).collect();
    }

    let bytes = fs::read(path)?;
    if bytes.len() >= 4 && bytes[..4] == BATCH_MAGIC {
        let batch = read_batch(&bytes)?;
        if batch.is_empty() {
            return Err(domain_err("load_dataset", format!("batch file {spec} is empty")));
        }
        return Ok(batch);
    }
    Ok(vec![read_image(&bytes)?])
}
