//! Site geometry and the observation tables attached to it.

use std::collections::HashMap;
use std::path::Path;

use crate::csvio::{self, csv_err, fmt_f64, parse_cell};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const EARTH_RADIUS_KM: f64 = 6371.0088;

/// The `D` observation locations, in planar coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSet {
    ids: Vec<String>,
    coords: Vec<[f64; 2]>,
}

impl SiteSet {
    pub fn new(ids: Vec<String>, coords: Vec<[f64; 2]>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("a site set needs at least one site"));
        }
        if ids.len() != coords.len() {
            return Err(Error::invalid(format!(
                "{} ids but {} coordinate pairs",
                ids.len(),
                coords.len()
            )));
        }
        let mut seen = HashMap::with_capacity(ids.len());
        for id in &ids {
            if seen.insert(id.as_str(), ()).is_some() {
                return Err(Error::DuplicateSiteId(id.clone()));
            }
        }
        if let Some(i) = coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::invalid(format!("site `{}` has non-finite coordinates", ids[i])));
        }
        Ok(SiteSet { ids, coords })
    }

    /// Sites with ids `"1"`, `"2"`, ... from bare coordinates.
    pub fn from_coords(coords: Vec<[f64; 2]>) -> Result<Self> {
        let ids = (1..=coords.len()).map(|i| i.to_string()).collect();
        SiteSet::new(ids, coords)
    }

    /// Regular `nx × ny` grid with unit spacing starting at (1, 1); x varies
    /// fastest and ids are 1-based in that order.
    pub fn grid(nx: usize, ny: usize) -> Result<Self> {
        let coords = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| [(i + 1) as f64, (j + 1) as f64]))
            .collect();
        SiteSet::from_coords(coords)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let [x1, y1] = self.coords[i];
        let [x2, y2] = self.coords[j];
        (x1 - x2).hypot(y1 - y2)
    }

    /// Reinterprets coordinates as (longitude, latitude) in degrees and maps
    /// them to kilometres with an equirectangular projection about the mean
    /// latitude.
    pub fn project_lonlat(&self) -> Result<SiteSet> {
        let lat0 = self.coords.iter().map(|c| c[1]).sum::<f64>() / self.len() as f64;
        let k = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        let cos0 = lat0.to_radians().cos();
        let coords = self
            .coords
            .iter()
            .map(|&[lon, lat]| [k * lon * cos0, k * lat])
            .collect();
        SiteSet::new(self.ids.clone(), coords)
    }
}

pub fn pairwise_distances(sites: &SiteSet) -> Matrix {
    let d = sites.len();
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            let h = sites.distance(i, j);
            m[(i, j)] = h;
            m[(j, i)] = h;
        }
    }
    m
}

pub fn load_sites(path: impl AsRef<Path>) -> Result<SiteSet> {
    let path = path.as_ref();
    let mut rdr = csvio::reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols != ["id", "x", "y"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `id,x,y`, found `{}`", cols.join(",")),
        });
    }
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |k: usize| {
            rec[k].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("invalid coordinate `{}`", &rec[k]),
            })
        };
        coords.push([num(1)?, num(2)?]);
        ids.push(rec[0].to_string());
    }
    SiteSet::new(ids, coords)
}

pub fn save_sites(path: impl AsRef<Path>, sites: &SiteSet, comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csvio::writer(path, comment)?;
    w.write_record(["id", "x", "y"]).map_err(|e| csv_err(path, e))?;
    for (id, c) in sites.ids.iter().zip(&sites.coords) {
        w.write_record([id.clone(), fmt_f64(c[0]), fmt_f64(c[1])])
            .map_err(|e| csv_err(path, e))?;
    }
    csvio::flush(path, w)
}

/// `n × D` observations, columns in site order; missing cells are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    site_ids: Vec<String>,
    times: Option<Vec<String>>,
    rows: usize,
    values: Vec<f64>,
}

impl DataMatrix {
    /// Builds a matrix from rows; NaN marks a missing cell.
    pub fn from_rows(
        site_ids: Vec<String>,
        rows: Vec<Vec<f64>>,
        times: Option<Vec<String>>,
    ) -> Result<Self> {
        let d = site_ids.len();
        if rows.is_empty() {
            return Err(Error::invalid("data matrix has no rows"));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::invalid(format!("row {i} has {} values, expected {d}", rows[i].len())));
        }
        if let Some(t) = &times {
            if t.len() != rows.len() {
                return Err(Error::invalid("time column length differs from row count"));
            }
        }
        let m = DataMatrix {
            site_ids,
            times,
            rows: rows.len(),
            values: rows.concat(),
        };
        if let Some(j) = (0..d).find(|&j| (0..m.rows).all(|i| m.values[i * d + j].is_nan())) {
            return Err(Error::invalid(format!("column `{}` is entirely missing", m.site_ids[j])));
        }
        Ok(m)
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.site_ids.len()
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn times(&self) -> Option<&[String]> {
        self.times.as_deref()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let v = self.values[i * self.ncols() + j];
        (!v.is_nan()).then_some(v)
    }

    /// Raw row including NaN markers.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.ncols();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn is_complete(&self, i: usize) -> bool {
        self.row(i).iter().all(|v| !v.is_nan())
    }

    /// Indices of rows with no missing value; dependence inference uses only these.
    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.rows).filter(|&i| self.is_complete(i)).collect()
    }

    /// Non-missing values of column `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).filter_map(|i| self.get(i, j)).collect()
    }

    /// Same shape, new values (NaN stays missing).
    pub fn map_columns(&self, mut f: impl FnMut(usize, f64) -> f64) -> DataMatrix {
        let d = self.ncols();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| if v.is_nan() { v } else { f(k % d, v) })
            .collect();
        DataMatrix {
            values,
            ..self.clone()
        }
    }
}

/// Reads `[time,]<id1>,...,<idD>`; columns are permuted into `sites` order.
pub fn load_data(path: impl AsRef<Path>, sites: &SiteSet) -> Result<DataMatrix> {
    let path = path.as_ref();
    let mut rdr = csvio::reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let has_time = header.get(0).is_some_and(|h| h.eq_ignore_ascii_case("time"));
    let first = usize::from(has_time);

    // target[k] = site index of file column first + k
    let mut target = Vec::with_capacity(header.len());
    let mut seen = vec![false; sites.len()];
    for name in header.iter().skip(first) {
        let idx = sites
            .index_of(name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))?;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::DuplicateSiteId(name.to_string()));
        }
        target.push(idx);
    }
    if let Some(j) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!("no column for site `{}`", sites.ids()[j])));
    }

    let mut rows = Vec::new();
    let mut times = has_time.then(Vec::new);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut row = vec![f64::NAN; sites.len()];
        for (k, &idx) in target.iter().enumerate() {
            let cell = &rec[first + k];
            row[idx] = parse_cell(cell)
                .map_err(|message| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message,
                })?
                .unwrap_or(f64::NAN);
        }
        if let Some(t) = times.as_mut() {
            t.push(rec[0].to_string());
        }
        rows.push(row);
    }
    DataMatrix::from_rows(sites.ids().to_vec(), rows, times)
}

pub fn save_data(path: impl AsRef<Path>, data: &DataMatrix, comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csvio::writer(path, comment)?;
    let mut header = Vec::with_capacity(data.ncols() + 1);
    if data.times.is_some() {
        header.push("time".to_string());
    }
    header.extend(data.site_ids.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..data.rows {
        let mut rec = Vec::with_capacity(header.len());
        if let Some(t) = &data.times {
            rec.push(t[i].clone());
        }
        rec.extend(data.row(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    csvio::flush(path, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_two_sites() {
        let f = write_tmp("id,x,y\na,0,0\nb,3,4\n");
        let s = load_sites(f.path()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.ids(), ["a", "b"]);
        assert_eq!(load_sites(f.path()).unwrap(), s);
        assert_eq!(pairwise_distances(&s)[(0, 1)], 5.0);
    }

    #[test]
    fn duplicate_site_id_rejected() {
        let f = write_tmp("id,x,y\na,0,0\na,1,1\n");
        assert!(matches!(load_sites(f.path()), Err(Error::DuplicateSiteId(id)) if id == "a"));
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write_tmp("id,x,y\na,0,0\nb,zz,1\n");
        match load_sites(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn distances_small_cases() {
        let one = SiteSet::from_coords(vec![[2.0, 2.0]]).unwrap();
        assert_eq!(pairwise_distances(&one), Matrix::zeros(1, 1));
        let line = SiteSet::from_coords(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).unwrap();
        let d = pairwise_distances(&line);
        assert_eq!((d[(0, 1)], d[(1, 2)], d[(0, 2)]), (1.0, 1.0, 2.0));
    }

    #[test]
    fn grid_matches_expand_grid_order() {
        let g = SiteSet::grid(20, 20).unwrap();
        assert_eq!(g.len(), 400);
        // R: expand.grid(1:20, 1:20)[110, ] == (10, 6)
        assert_eq!(g.coords()[g.index_of("110").unwrap()], [10.0, 6.0]);
    }

    fn two_sites() -> SiteSet {
        SiteSet::new(vec!["a".into(), "b".into()], vec![[0.0, 0.0], [1.0, 0.0]]).unwrap()
    }

    #[test]
    fn loads_data_and_permutes_columns() {
        let sites = two_sites();
        let fwd = write_tmp("time,a,b\nt1,1,10\nt2,2,20\nt3,3,30\n");
        let rev = write_tmp("b,a\n10,1\n20,2\n30,3\n");
        let m1 = load_data(fwd.path(), &sites).unwrap();
        let m2 = load_data(rev.path(), &sites).unwrap();
        assert_eq!((m1.nrows(), m1.ncols()), (3, 2));
        assert_eq!(m1.column(0), m2.column(0));
        assert_eq!(m1.column(1), vec![10.0, 20.0, 30.0]);
        assert_eq!(m1.times().unwrap()[2], "t3");
        assert!(m2.times().is_none());
    }

    #[test]
    fn missing_cells_and_errors() {
        let sites = two_sites();
        let f = write_tmp("a,b\n1,NA\n2,3\n");
        let m = load_data(f.path(), &sites).unwrap();
        assert_eq!(m.get(0, 1), None);
        assert_eq!(m.complete_rows(), vec![1]);

        let bad = write_tmp("a,b\n1,x\n");
        assert!(matches!(load_data(bad.path(), &sites), Err(Error::Parse { line: 2, .. })));
        let unknown = write_tmp("a,c\n1,2\n");
        assert!(matches!(load_data(unknown.path(), &sites), Err(Error::UnknownColumn(c)) if c == "c"));
        let empty_col = write_tmp("a,b\n1,NA\n2,NA\n");
        assert!(load_data(empty_col.path(), &sites).is_err());
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let sites = two_sites();
        let m = DataMatrix::from_rows(
            sites.ids().to_vec(),
            vec![vec![0.1 + 0.2, f64::NAN], vec![1e-300, -3.5]],
            Some(vec!["x".into(), "y".into()]),
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_data(f.path(), &m, Some("seed=1")).unwrap();
        let back = load_data(f.path(), &sites).unwrap();
        assert_eq!(back.row(0)[0], m.row(0)[0]);
        assert!(back.row(0)[1].is_nan());
        assert_eq!(back.row(1), m.row(1));
        assert_eq!(back.times(), m.times());
    }

    #[test]
    fn lonlat_projection_scale() {
        let s = SiteSet::from_coords(vec![[0.0, 0.0], [0.0, 1.0]]).unwrap();
        let p = s.project_lonlat().unwrap();
        assert!((p.distance(0, 1) - 111.19).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn triangle_inequality(pts in prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 3..12)) {
            let sites = SiteSet::from_coords(pts.iter().map(|&(x, y)| [x, y]).collect()).unwrap();
            let d = pairwise_distances(&sites);
            let n = sites.len();
            for i in 0..n { for j in 0..n { for k in 0..n {
                prop_assert!(d[(i, k)] <= d[(i, j)] + d[(j, k)] + 1e-9);
            }}}
            prop_assert!(d.is_symmetric(0.0));
        }
    }
}
