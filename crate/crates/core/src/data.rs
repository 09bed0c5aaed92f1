//! The (X, Y, Z) sample container and its CSV form.
//!
//! CSV files carry a required header naming every column `x<i>`, `y<i>` or
//! `z<i>`; all cells are numeric. Discrete variables are expected to be
//! pre-encoded (for example as ±1).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnRole {
    Continuous,
    DiscreteEncoded,
}

/// Row-aligned blocks of observations. An unlabeled set has a zero-width Y block.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    y: Array2<f64>,
    z: Array2<f64>,
    z_roles: Vec<ColumnRole>,
}

fn check_finite(block: &Array2<f64>, name: &str) -> Result<()> {
    if let Some(pos) = block.iter().position(|v| !v.is_finite()) {
        let cols = block.ncols().max(1);
        return Err(Error::numeric(format!(
            "non-finite entry in {name} block at row {}",
            pos / cols
        )));
    }
    Ok(())
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>, z: Array2<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() || x.nrows() != z.nrows() {
            return Err(Error::shape(format!(
                "block row counts differ: x {}, y {}, z {}",
                x.nrows(),
                y.nrows(),
                z.nrows()
            )));
        }
        check_finite(&x, "x")?;
        check_finite(&y, "y")?;
        check_finite(&z, "z")?;
        let z_roles = vec![ColumnRole::Continuous; z.ncols()];
        Ok(Dataset { x, y, z, z_roles })
    }

    /// An (X, Z) set used to train the conditional sampler.
    pub fn unlabeled(x: Array2<f64>, z: Array2<f64>) -> Result<Self> {
        let n = x.nrows();
        Dataset::new(x, Array2::zeros((n, 0)), z)
    }

    pub fn with_z_roles(mut self, roles: Vec<ColumnRole>) -> Result<Self> {
        if roles.len() != self.z.ncols() {
            return Err(Error::shape(format!(
                "{} roles for {} z columns",
                roles.len(),
                self.z.ncols()
            )));
        }
        self.z_roles = roles;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.n() == 0
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn d_y(&self) -> usize {
        self.y.ncols()
    }

    pub fn d_z(&self) -> usize {
        self.z.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> ArrayView2<'_, f64> {
        self.y.view()
    }

    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn z_roles(&self) -> &[ColumnRole] {
        &self.z_roles
    }

    pub fn same_dims(&self, other: &Dataset) -> bool {
        self.d_x() == other.d_x() && self.d_y() == other.d_y() && self.d_z() == other.d_z()
    }

    /// Rows in the given order (indices may repeat).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            z: self.z.select(Axis(0), rows),
            z_roles: self.z_roles.clone(),
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Dataset {
        let rows: Vec<usize> = (start..end.min(self.n())).collect();
        self.select_rows(&rows)
    }

    /// Same Y and Z blocks with a replacement X block.
    pub fn with_x(&self, x: Array2<f64>) -> Result<Dataset> {
        if x.nrows() != self.n() || x.ncols() != self.d_x() {
            return Err(Error::shape(format!(
                "replacement x block is {}x{}, expected {}x{}",
                x.nrows(),
                x.ncols(),
                self.n(),
                self.d_x()
            )));
        }
        check_finite(&x, "x")?;
        Ok(Dataset {
            x,
            y: self.y.clone(),
            z: self.z.clone(),
            z_roles: self.z_roles.clone(),
        })
    }

    /// Same X and Z blocks with a replacement Y block.
    pub fn with_y(&self, y: Array2<f64>) -> Result<Dataset> {
        if y.nrows() != self.n() || y.ncols() != self.d_y() {
            return Err(Error::shape("replacement y block has the wrong shape"));
        }
        Ok(Dataset {
            x: self.x.clone(),
            y,
            z: self.z.clone(),
            z_roles: self.z_roles.clone(),
        })
    }

    /// Drops the Y block.
    pub fn to_unlabeled(&self) -> Dataset {
        Dataset {
            x: self.x.clone(),
            y: Array2::zeros((self.n(), 0)),
            z: self.z.clone(),
            z_roles: self.z_roles.clone(),
        }
    }

    /// Concatenated feature rows `(x, y, z)`.
    pub fn features(&self) -> Array2<f64> {
        concatenate(Axis(1), &[self.x.view(), self.y.view(), self.z.view()]).expect("blocks share the row count")
    }

    pub fn header(&self) -> Vec<String> {
        let mut cols = Vec::with_capacity(self.d_x() + self.d_y() + self.d_z());
        cols.extend((0..self.d_x()).map(|i| format!("x{i}")));
        cols.extend((0..self.d_y()).map(|i| format!("y{i}")));
        cols.extend((0..self.d_z()).map(|i| format!("z{i}")));
        cols
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        read_csv_from(path, BufReader::new(file))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        writeln!(out, "{}", self.header().join(",")).map_err(io_err)?;
        let features = self.features();
        for row in features.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(",")).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

#[derive(Clone, Copy)]
enum Block {
    X,
    Y,
    Z,
}

fn parse_column(name: &str) -> Option<(Block, usize)> {
    let name = name.trim();
    let block = match name.chars().next()? {
        'x' => Block::X,
        'y' => Block::Y,
        'z' => Block::Z,
        _ => return None,
    };
    let index: usize = name[1..].parse().ok()?;
    Some((block, index))
}

pub(crate) fn read_csv_from<R: std::io::Read>(path: &Path, reader: R) -> Result<Dataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(rec) => rec.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "empty file, header row required".into())),
    };
    let mut columns = Vec::with_capacity(header.len());
    for field in header.iter() {
        match parse_column(field) {
            Some(col) => columns.push(col),
            None if field.parse::<f64>().is_ok() => {
                return Err(parse_err(
                    1,
                    "missing header row (expected column names x0.., y0.., z0..)".into(),
                ))
            }
            None => return Err(parse_err(1, format!("unrecognised column name `{field}`"))),
        }
    }
    let width = |b: Block| {
        columns
            .iter()
            .filter(|(blk, _)| std::mem::discriminant(blk) == std::mem::discriminant(&b))
            .count()
    };
    let (dx, dy, dz) = (width(Block::X), width(Block::Y), width(Block::Z));
    for (blk, idx) in &columns {
        let limit = match blk {
            Block::X => dx,
            Block::Y => dy,
            Block::Z => dz,
        };
        if *idx >= limit {
            return Err(parse_err(
                1,
                format!("column indices must be contiguous from 0 (saw index {idx})"),
            ));
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut zs = Vec::new();
    let mut n = 0usize;
    for (offset, rec) in records.enumerate() {
        let line = offset as u64 + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != columns.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", columns.len(), rec.len()),
            ));
        }
        let mut xr = vec![0.0; dx];
        let mut yr = vec![0.0; dy];
        let mut zr = vec![0.0; dz];
        for (field, (blk, idx)) in rec.iter().zip(&columns) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric value `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value `{field}`")));
            }
            match blk {
                Block::X => xr[*idx] = v,
                Block::Y => yr[*idx] = v,
                Block::Z => zr[*idx] = v,
            }
        }
        xs.extend(xr);
        ys.extend(yr);
        zs.extend(zr);
        n += 1;
    }
    let x = Array2::from_shape_vec((n, dx), xs).expect("row-major fill");
    let y = Array2::from_shape_vec((n, dy), ys).expect("row-major fill");
    let z = Array2::from_shape_vec((n, dz), zs).expect("row-major fill");
    let roles = z
        .columns()
        .into_iter()
        .map(|col| {
            if n > 0 && col.iter().all(|&v| v == 1.0 || v == -1.0) {
                ColumnRole::DiscreteEncoded
            } else {
                ColumnRole::Continuous
            }
        })
        .collect();
    Dataset::new(x, y, z)?.with_z_roles(roles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mismatched_blocks_are_rejected() {
        let err = Dataset::new(array![[1.0], [2.0]], array![[1.0]], array![[0.0], [1.0]]);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn csv_round_trip() {
        let ds = Dataset::new(
            array![[1.5], [-2.0]],
            array![[0.25], [3.0]],
            array![[1.0, 0.1], [-1.0, 1e-9]],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(back.x(), ds.x());
        assert_eq!(back.y(), ds.y());
        assert_eq!(back.z(), ds.z());
        assert_eq!(back.z_roles()[0], ColumnRole::DiscreteEncoded);
        assert_eq!(back.z_roles()[1], ColumnRole::Continuous);
    }

    #[test]
    fn csv_columns_may_be_reordered() {
        let text = "z0,y0,x0\n3,2,1\n";
        let ds = read_csv_from(Path::new("mem.csv"), text.as_bytes()).unwrap();
        assert_eq!(ds.x()[[0, 0]], 1.0);
        assert_eq!(ds.y()[[0, 0]], 2.0);
        assert_eq!(ds.z()[[0, 0]], 3.0);
    }

    #[test]
    fn missing_header_names_the_file() {
        let err = read_csv_from(Path::new("data.csv"), "1,2,3\n4,5,6\n".as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("data.csv"), "{msg}");
        assert!(msg.contains("missing header"), "{msg}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn bad_cell_reports_line_number() {
        let text = "x0,z0\n1,2\n3,oops\n";
        match read_csv_from(Path::new("d.csv"), text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn with_x_keeps_other_blocks() {
        let ds = Dataset::new(array![[1.0], [2.0]], array![[3.0], [4.0]], array![[5.0], [6.0]]).unwrap();
        let swapped = ds.with_x(array![[9.0], [8.0]]).unwrap();
        assert_eq!(swapped.y(), ds.y());
        assert_eq!(swapped.z(), ds.z());
        assert!(ds.with_x(array![[1.0, 2.0], [3.0, 4.0]]).is_err());
    }
}
