//! Field snapshots on disk.
//!
//! CSV: a `nx,ny,t` header record, then one record per grid point
//! `i,j,<field values>`. Binary: `nx` and `ny` as little-endian `u64`, `t` as
//! `f64`, then the state vector as little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub nx: usize,
    pub ny: usize,
    pub t: f64,
    /// Field-major, grid order within each field.
    pub data: Vec<f64>,
}

impl Snapshot {
    pub fn fields(&self) -> usize {
        self.data.len() / (self.nx * self.ny).max(1)
    }

    fn field_names(fields: usize) -> Vec<String> {
        if fields == 3 {
            vec!["eta".into(), "u".into(), "v".into()]
        } else {
            (0..fields).map(|f| format!("value_{f}")).collect()
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(csv_err)?;
        w.write_record(["nx", "ny", "t"]).map_err(csv_err)?;
        w.write_record([self.nx.to_string(), self.ny.to_string(), format!("{:e}", self.t)])
            .map_err(csv_err)?;
        let fields = self.fields();
        let mut head = vec!["i".to_string(), "j".to_string()];
        head.extend(Self::field_names(fields));
        w.write_record(&head).map_err(csv_err)?;
        let n = self.nx * self.ny;
        for j in 0..self.ny {
            for i in 0..self.nx {
                let p = i + j * self.nx;
                let mut rec = vec![i.to_string(), j.to_string()];
                rec.extend((0..fields).map(|f| format!("{:e}", self.data[f * n + p])));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_path(path)
            .map_err(csv_err)?;
        let mut records = r.records();
        let mut next = || -> Result<csv::StringRecord> {
            records
                .next()
                .ok_or_else(|| Error::Format("truncated snapshot".into()))?
                .map_err(csv_err)
        };
        next()?;
        let header = next()?;
        if header.len() != 3 {
            return Err(Error::Format("snapshot header needs nx, ny, t".into()));
        }
        let nx: usize = parse(&header[0])?;
        let ny: usize = parse(&header[1])?;
        let t: f64 = parse(&header[2])?;
        let cols = next()?;
        let fields = cols.len().checked_sub(2).filter(|&f| f > 0).ok_or_else(|| Error::Format("no field columns".into()))?;
        let n = nx * ny;
        let mut data = vec![f64::NAN; fields * n];
        let mut seen = vec![false; n];
        for rec in records {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != fields + 2 {
                return Err(Error::Format(format!("expected {} columns, found {}", fields + 2, rec.len())));
            }
            let (i, j): (usize, usize) = (parse(&rec[0])?, parse(&rec[1])?);
            if i >= nx || j >= ny {
                return Err(Error::Format(format!("point ({i}, {j}) outside {nx}x{ny} grid")));
            }
            let p = i + j * nx;
            seen[p] = true;
            for f in 0..fields {
                data[f * n + p] = parse(&rec[f + 2])?;
            }
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("snapshot is missing point {p}")));
        }
        Ok(Self { nx, ny, t, data })
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(self.nx as u64).to_le_bytes())?;
        w.write_all(&(self.ny as u64).to_le_bytes())?;
        w.write_all(&self.t.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() < 24 || (bytes.len() - 24) % 8 != 0 {
            return Err(Error::Format(format!("bad snapshot length {}", bytes.len())));
        }
        let word = |k: usize| -> [u8; 8] { bytes[8 * k..8 * k + 8].try_into().unwrap() };
        let nx = u64::from_le_bytes(word(0)) as usize;
        let ny = u64::from_le_bytes(word(1)) as usize;
        let t = f64::from_le_bytes(word(2));
        let data: Vec<f64> = (3..bytes.len() / 8).map(|k| f64::from_le_bytes(word(k))).collect();
        if nx * ny == 0 || data.len() % (nx * ny) != 0 {
            return Err(Error::Format(format!("{} values do not fill a {nx}x{ny} grid", data.len())));
        }
        Ok(Self { nx, ny, t, data })
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Format(format!("cannot parse `{s}`")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let dir = std::env::temp_dir().join(format!("lsmcmc-snap-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let s = Snapshot {
            nx: 3,
            ny: 2,
            t: 1200.0,
            data: (0..18).map(|k| k as f64 * 0.1 + 1.0 / 3.0).collect(),
        };
        let c = dir.join("s.csv");
        s.write_csv(&c).unwrap();
        assert_eq!(Snapshot::read_csv(&c).unwrap(), s);
        let b = dir.join("s.bin");
        s.write_binary(&b).unwrap();
        assert_eq!(Snapshot::read_binary(&b).unwrap(), s);
        assert_eq!(s.fields(), 3);
        std::fs::remove_dir_all(&dir).ok();
    }
}
