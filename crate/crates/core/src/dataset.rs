//! Paired image / measurement datasets and their binary file format.
//!
//! File layout, little endian: magic `EITD`, version `u32`, record count
//! `u32`, image side `u32`, measurement count `u32`; then per record a `u64`
//! seed, `side²` `f32` pixels row-major and `m` `f32` measurements.
//! Plain image stacks use the same layout with `m = 0`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{check_len, EitError, Result};
use crate::fem::{add_measurement_noise, solve_forward, MeasurementVector, Protocol};
use crate::mesh::Mesh;
use crate::phantom::{sample_phantom, PhantomKind, PhantomSpec};
use crate::raster::{rasterize_default, PixelImage};

pub const MAGIC: &[u8; 4] = b"EITD";
pub const VERSION: u32 = 1;
const CHUNK: usize = 64;
const NOISE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub count: u32,
    pub side: u32,
    pub n_measurements: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub seed: u64,
    pub image: PixelImage,
    pub measurements: MeasurementVector,
}

fn write_header<W: Write>(w: &mut W, h: Header) -> Result<()> {
    w.write_all(MAGIC)?;
    for v in [VERSION, h.count, h.side, h.n_measurements] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EitError::Format("not a dataset file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(EitError::Format(format!("unsupported dataset version {version}")));
    }
    Ok(Header {
        count: read_u32(r)?,
        side: read_u32(r)?,
        n_measurements: read_u32(r)?,
    })
}

fn write_f32s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_record<W: Write>(w: &mut W, h: Header, rec: &DatasetRecord) -> Result<()> {
    check_len("record image side", h.side as usize, rec.image.side())?;
    check_len("record measurements", h.n_measurements as usize, rec.measurements.len())?;
    w.write_all(&rec.seed.to_le_bytes())?;
    write_f32s(w, rec.image.values())?;
    write_f32s(w, rec.measurements.values())
}

fn read_record<R: Read>(r: &mut R, h: Header) -> Result<DatasetRecord> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let side = h.side as usize;
    let image = PixelImage::new(side, read_f32s(r, side * side)?)?;
    let measurements = MeasurementVector::new(read_f32s(r, h.n_measurements as usize)?)?;
    Ok(DatasetRecord {
        seed: u64::from_le_bytes(b),
        image,
        measurements,
    })
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".tmp");
    PathBuf::from(s)
}

/// Write to `path.tmp` and rename into place, removing the temporary file
/// if anything fails.
pub fn write_atomically(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = tmp_path(path);
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
        drop(w);
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn write_records(path: &Path, side: usize, n_measurements: usize, records: &[DatasetRecord]) -> Result<()> {
    let h = Header {
        count: records.len() as u32,
        side: side as u32,
        n_measurements: n_measurements as u32,
    };
    write_atomically(path, |w| {
        write_header(w, h)?;
        records.iter().try_for_each(|r| write_record(w, h, r))
    })
}

pub fn read_records(path: &Path) -> Result<(Header, Vec<DatasetRecord>)> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    let records = (0..h.count).map(|_| read_record(&mut r, h)).collect::<Result<Vec<_>>>()?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(EitError::Format("trailing bytes after last record".into()));
    }
    Ok((h, records))
}

/// Save a stack of equally sized images.
pub fn write_images(path: &Path, images: &[PixelImage]) -> Result<()> {
    let side = images.first().map_or(0, PixelImage::side);
    let records = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            Ok(DatasetRecord {
                seed: i as u64,
                image: img.clone(),
                measurements: MeasurementVector::new(Vec::new())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_records(path, side, 0, &records)
}

/// Load the images of any dataset or image-stack file.
pub fn read_images(path: &Path) -> Result<Vec<PixelImage>> {
    Ok(read_records(path)?.1.into_iter().map(|r| r.image).collect())
}

/// Everything needed to simulate measurements.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub mesh: Mesh,
    pub impedances: Vec<f64>,
    pub protocol: Protocol,
}

/// Build one record: draw the phantom, rasterize it and simulate noisy data.
/// `snr_db = ∞` gives noiseless data.
pub fn make_record(
    model: &ForwardModel,
    kind: PhantomKind,
    seed: u64,
    snr_db: f64,
    side: usize,
) -> Result<(DatasetRecord, PhantomSpec)> {
    let spec = sample_phantom(kind, seed);
    let sigma = spec.paint(&model.mesh)?;
    let image = rasterize_default(&model.mesh, &sigma, side, spec.background)?;
    let (_, clean) = solve_forward(&model.mesh, &sigma, &model.impedances, &model.protocol)?;
    let measurements = add_measurement_noise(&clean, snr_db, noise_seed(seed))?;
    Ok((
        DatasetRecord {
            seed,
            image,
            measurements,
        },
        spec,
    ))
}

pub fn noise_seed(record_seed: u64) -> u64 {
    record_seed ^ NOISE_SALT
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRange {
    pub name: &'static str,
    pub start: usize,
    pub end: usize,
}

impl SplitRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn file_name(&self) -> String {
        format!("{}.bin", self.name)
    }
}

/// Contiguous train / val / test index ranges.
pub fn plan_splits(count: usize, split: (usize, usize, usize)) -> Result<Vec<SplitRange>> {
    let (a, b, c) = split;
    if a + b + c != count {
        return Err(EitError::invalid(format!(
            "split {a}+{b}+{c} does not add up to {count} records"
        )));
    }
    Ok(vec![
        SplitRange { name: "train", start: 0, end: a },
        SplitRange { name: "val", start: a, end: a + b },
        SplitRange { name: "test", start: a + b, end: count },
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub kind: PhantomKind,
    pub count: usize,
    pub snr_db: f64,
    pub split: (usize, usize, usize),
    pub base_seed: u64,
    pub side: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub kind: PhantomKind,
    pub snr_db: f64,
    pub base_seed: u64,
    pub side: usize,
    pub n_measurements: usize,
    pub splits: Vec<SplitRange>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "kind {}\nsnr_db {}\nbase_seed {}\nside {}\nmeasurements {}\n",
            self.kind, self.snr_db, self.base_seed, self.side, self.n_measurements
        );
        for sp in &self.splits {
            s.push_str(&format!("{} {} {} {}\n", sp.name, sp.start, sp.end, sp.file_name()));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let bad = |l: &str| EitError::Format(format!("bad manifest line `{l}`"));
        let mut kind = None;
        let (mut snr_db, mut base_seed, mut side, mut n_measurements) = (None, None, None, None);
        let mut splits = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            match (f[0], f.len()) {
                ("kind", 2) => kind = Some(f[1].parse::<PhantomKind>().map_err(|_| bad(line))?),
                ("snr_db", 2) => snr_db = Some(f[1].parse::<f64>().map_err(|_| bad(line))?),
                ("base_seed", 2) => base_seed = Some(f[1].parse::<u64>().map_err(|_| bad(line))?),
                ("side", 2) => side = Some(f[1].parse::<usize>().map_err(|_| bad(line))?),
                ("measurements", 2) => n_measurements = Some(f[1].parse::<usize>().map_err(|_| bad(line))?),
                (name @ ("train" | "val" | "test"), 4) => {
                    let name = match name {
                        "train" => "train",
                        "val" => "val",
                        _ => "test",
                    };
                    let start = f[1].parse().map_err(|_| bad(line))?;
                    let end = f[2].parse().map_err(|_| bad(line))?;
                    splits.push(SplitRange { name, start, end });
                }
                _ => return Err(bad(line)),
            }
        }
        let missing = |k: &str| EitError::Format(format!("manifest lacks `{k}`"));
        Ok(Manifest {
            kind: kind.ok_or_else(|| missing("kind"))?,
            snr_db: snr_db.ok_or_else(|| missing("snr_db"))?,
            base_seed: base_seed.ok_or_else(|| missing("base_seed"))?,
            side: side.ok_or_else(|| missing("side"))?,
            n_measurements: n_measurements.ok_or_else(|| missing("measurements"))?,
            splits,
        })
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        Manifest::parse(&fs::read_to_string(dir.join("manifest.txt"))?)
    }
}

/// Generate every split into `out_dir` (`train.bin`, `val.bin`, `test.bin`
/// and `manifest.txt`). Record `i` uses seed `base_seed + i`. Records are
/// computed in parallel and written in index order; on failure no partial
/// file is left behind.
pub fn generate_dataset(model: &ForwardModel, config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    let splits = plan_splits(config.count, config.split)?;
    if config.side == 0 {
        return Err(EitError::invalid("image side must be positive"));
    }
    fs::create_dir_all(out_dir)?;
    let m = model.protocol.n_measurements();
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| {
        for sp in &splits {
            let path = out_dir.join(sp.file_name());
            let h = Header {
                count: sp.len() as u32,
                side: config.side as u32,
                n_measurements: m as u32,
            };
            write_atomically(&path, |w| {
                write_header(w, h)?;
                let idx: Vec<usize> = (sp.start..sp.end).collect();
                for chunk in idx.chunks(CHUNK) {
                    let recs = chunk
                        .par_iter()
                        .map(|&i| {
                            let seed = config.base_seed.wrapping_add(i as u64);
                            make_record(model, config.kind, seed, config.snr_db, config.side).map(|r| r.0)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    recs.iter().try_for_each(|r| write_record(w, h, r))?;
                }
                Ok(())
            })?;
            written.push(path);
        }
        let manifest = Manifest {
            kind: config.kind,
            snr_db: config.snr_db,
            base_seed: config.base_seed,
            side: config.side,
            n_measurements: m,
            splits: splits.clone(),
        };
        let mpath = out_dir.join("manifest.txt");
        write_atomically(&mpath, |w| Ok(w.write_all(manifest.to_text().as_bytes())?))?;
        Ok(manifest)
    })();
    if result.is_err() {
        for p in written {
            let _ = fs::remove_file(p);
        }
    }
    result
}
