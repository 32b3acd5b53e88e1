//! File formats: binary field snapshots and trajectories (little endian,
//! FNV-1a checksummed), CSV field tables and 8-bit PGM previews.
//!
//! Snapshot layout (`FIELD v1`):
//! `b"KWCFIELD"`, version `u32`, step `u64`, time `f64`, grid, component
//! count `u32`, then per component a `u16`-prefixed UTF-8 name and one `f64`
//! per cell; a trailing `u64` checksum covers every preceding byte.
//! A grid is written as dim `u32`, two `u64` extents and two `f64` spacings.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::grid::{Field, FieldPair, Grid, GridError};

const FIELD_MAGIC: &[u8; 8] = b"KWCFIELD";
const TRAJ_MAGIC: &[u8; 8] = b"KWCTRAJ1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a {0} file (bad magic)")]
    BadMagic(&'static str),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("snapshot has no component named {0:?}")]
    MissingComponent(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Default)]
struct Encoder(Vec<u8>);

impl Encoder {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u16(&mut self, x: u16) {
        self.bytes(&x.to_le_bytes());
    }
    fn u32(&mut self, x: u32) {
        self.bytes(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.bytes(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.bytes(&x.to_le_bytes());
    }
    fn grid(&mut self, g: &Grid) {
        self.u32(g.dim() as u32);
        let shape = g.shape();
        let dx = g.spacing();
        for k in 0..2 {
            self.u64(shape.get(k).copied().unwrap_or(1) as u64);
        }
        for k in 0..2 {
            self.f64(dx.get(k).copied().unwrap_or(1.0));
        }
    }
    fn values(&mut self, f: &Field) {
        for v in f.values() {
            self.f64(*v);
        }
    }
    fn finish(mut self) -> Vec<u8> {
        let sum = fnv1a(&self.0);
        self.u64(sum);
        self.0
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    /// Verifies magic and checksum; the decoder then reads the body.
    fn open(buf: &'a [u8], magic: &[u8; 8], what: &'static str) -> Result<Self, IoError> {
        if buf.len() < 8 || &buf[..8] != magic {
            return Err(if buf.len() < 8 {
                IoError::Truncated
            } else {
                IoError::BadMagic(what)
            });
        }
        if buf.len() < 16 {
            return Err(IoError::Truncated);
        }
        let (body, tail) = buf.split_at(buf.len() - 8);
        let sum = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a(body) != sum {
            return Err(IoError::Checksum);
        }
        Ok(Self { buf: body, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).ok_or(IoError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(IoError::Truncated)?;
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn grid(&mut self) -> Result<Grid, IoError> {
        let dim = self.u32()? as usize;
        let n = [self.u64()?, self.u64()?];
        let dx = [self.f64()?, self.f64()?];
        if !(dim == 1 || dim == 2) {
            return Err(IoError::Malformed(format!("dimension {dim}")));
        }
        let shape: Vec<usize> = n[..dim].iter().map(|&k| k as usize).collect();
        Ok(Grid::new(&shape, &dx[..dim])?)
    }
    fn values(&mut self, grid: Grid) -> Result<Field, IoError> {
        let n = grid.len();
        if self.buf.len().saturating_sub(self.pos) < 8 * n {
            return Err(IoError::Truncated);
        }
        let vals = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Ok(Field::new(grid, vals)?)
    }
    fn done(&self) -> Result<(), IoError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(IoError::Malformed("trailing bytes".into()))
        }
    }
}

/// Named fields on one grid at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub time: f64,
    pub components: Vec<(String, Field)>,
}

impl Snapshot {
    /// The usual `w`, `eta`, `theta` triple.
    pub fn of_state(step: u64, time: f64, v: &FieldPair, theta: &Field) -> Self {
        Self {
            step,
            time,
            components: vec![
                ("w".into(), v.w.clone()),
                ("eta".into(), v.eta.clone()),
                ("theta".into(), theta.clone()),
            ],
        }
    }

    pub fn component(&self, name: &str) -> Result<&Field, IoError> {
        self.components
            .iter()
            .find(|c| c.0 == name)
            .map(|c| &c.1)
            .ok_or_else(|| IoError::MissingComponent(name.to_string()))
    }

    pub fn state(&self) -> Result<(FieldPair, Field), IoError> {
        let v = FieldPair::new(self.component("w")?.clone(), self.component("eta")?.clone())?;
        Ok((v, self.component("theta")?.clone()))
    }

    pub fn grid(&self) -> Option<&Grid> {
        self.components.first().map(|c| c.1.grid())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, IoError> {
        let grid = *self
            .grid()
            .ok_or_else(|| IoError::Malformed("snapshot without components".into()))?;
        if self.components.iter().any(|c| *c.1.grid() != grid) {
            return Err(GridError::Mismatch.into());
        }
        let mut e = Encoder::default();
        e.bytes(FIELD_MAGIC);
        e.u32(VERSION);
        e.u64(self.step);
        e.f64(self.time);
        e.grid(&grid);
        e.u32(self.components.len() as u32);
        for (name, f) in &self.components {
            let len = u16::try_from(name.len())
                .map_err(|_| IoError::Malformed("component name too long".into()))?;
            e.u16(len);
            e.bytes(name.as_bytes());
            e.values(f);
        }
        Ok(e.finish())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, IoError> {
        let mut d = Decoder::open(buf, FIELD_MAGIC, "FIELD snapshot")?;
        let version = d.u32()?;
        if version != VERSION {
            return Err(IoError::Version(version));
        }
        let step = d.u64()?;
        let time = d.f64()?;
        let grid = d.grid()?;
        let count = d.u32()?;
        let mut components = Vec::new();
        for _ in 0..count {
            let len = d.u16()? as usize;
            let name = std::str::from_utf8(d.take(len)?)
                .map_err(|_| IoError::Malformed("component name is not UTF-8".into()))?
                .to_string();
            components.push((name, d.values(grid)?));
        }
        d.done()?;
        Ok(Self {
            step,
            time,
            components,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Fields of a whole run: one `(v, theta, u)` entry per record, `u` absent
/// for the initial one.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedTrajectory {
    pub h: f64,
    pub grid: Grid,
    pub states: Vec<(FieldPair, Field, Option<Field>)>,
}

impl SavedTrajectory {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::default();
        e.bytes(TRAJ_MAGIC);
        e.u32(VERSION);
        e.f64(self.h);
        e.grid(&self.grid);
        e.u64(self.states.len() as u64);
        for (v, theta, u) in &self.states {
            e.bytes(&[u8::from(u.is_some())]);
            e.values(&v.w);
            e.values(&v.eta);
            e.values(theta);
            if let Some(u) = u {
                e.values(u);
            }
        }
        e.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, IoError> {
        let mut d = Decoder::open(buf, TRAJ_MAGIC, "trajectory")?;
        let version = d.u32()?;
        if version != VERSION {
            return Err(IoError::Version(version));
        }
        let h = d.f64()?;
        let grid = d.grid()?;
        let count = d.u64()?;
        let mut states = Vec::new();
        for _ in 0..count {
            let has_u = match d.u8()? {
                0 => false,
                1 => true,
                b => return Err(IoError::Malformed(format!("source flag {b}"))),
            };
            let w = d.values(grid)?;
            let eta = d.values(grid)?;
            let theta = d.values(grid)?;
            let u = if has_u { Some(d.values(grid)?) } else { None };
            states.push((FieldPair { w, eta }, theta, u));
        }
        d.done()?;
        Ok(Self { h, grid, states })
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// One row per cell: center coordinates followed by every component.
pub fn write_fields_csv(path: &Path, snapshot: &Snapshot) -> Result<(), IoError> {
    let grid = *snapshot
        .grid()
        .ok_or_else(|| IoError::Malformed("snapshot without components".into()))?;
    let mut out = String::from("x,y");
    for (name, _) in &snapshot.components {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for c in 0..grid.len() {
        let [x, y] = grid.center(c);
        out.push_str(&format!("{x},{y}"));
        for (_, f) in &snapshot.components {
            out.push_str(&format!(",{}", f.values()[c]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Binary 8-bit PGM, min-max scaled (a constant field maps to 0), with the
/// scaling written to `<path>.txt`. Row 0 of the image is the top row
/// (largest second index) so the picture has the usual orientation.
pub fn write_pgm(path: &Path, field: &Field) -> Result<(), IoError> {
    let grid = field.grid();
    let (nx, ny) = (grid.shape()[0], grid.shape().get(1).copied().unwrap_or(1));
    let (lo, hi) = (field.min(), field.max());
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut file = fs::File::create(path)?;
    write!(file, "P5\n{nx} {ny}\n255\n")?;
    let mut pixels = Vec::with_capacity(nx * ny);
    for j in (0..ny).rev() {
        for i in 0..nx {
            let v = field.values()[i * ny + j];
            pixels.push(((v - lo) * scale).round().clamp(0.0, 255.0) as u8);
        }
    }
    file.write_all(&pixels)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    fs::write(
        Path::new(&side),
        format!("min = {lo:e}\nmax = {hi:e}\nvalue = min + pixel * (max - min) / 255\n"),
    )?;
    Ok(())
}
