//! Plain-text system files.
//!
//! A system directory holds
//!
//! * `E.mtx`, `A.mtx`, `B.mtx`, `C.mtx` and optionally `G.mtx`: MatrixMarket
//!   `coordinate real general` (1-based indices; `symmetric` is accepted on
//!   input),
//! * `H.coo3`: header `%%Coo3 n`, then one `i j k value` line per entry with
//!   0-based indices; the tensor is symmetrized on load,
//! * optionally `zbar.vec`, `fz.vec`, `fq.vec`: one value per line.
//!
//! Values are written with the shortest representation that parses back to
//! the same `f64`, so save/load round-trips are bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::{QuadraticSystem, SymQuadTensor};

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { file: file.display().to_string(), line, msg: msg.into() }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('%') && !l.starts_with('#'))
}

fn parse_num<T: std::str::FromStr>(file: &Path, line: usize, tok: Option<&str>, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| parse_err(file, line, format!("missing {what}")))?;
    tok.parse().map_err(|_| parse_err(file, line, format!("cannot parse {what} from `{tok}`")))
}

pub fn write_matrix_market(path: &Path, m: &Mat) -> Result<()> {
    let mut out = String::from("%%MatrixMarket matrix coordinate real general\n");
    let nnz = m.iter().filter(|&&v| v != 0.0).count();
    writeln!(out, "{} {} {}", m.nrows(), m.ncols(), nnz).unwrap();
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let v = m[(i, j)];
            if v != 0.0 {
                writeln!(out, "{} {} {:?}", i + 1, j + 1, v).unwrap();
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_matrix_market(path: &Path) -> Result<Mat> {
    let text = fs::read_to_string(path)?;
    let header = text.lines().next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let words: Vec<String> = header.split_whitespace().map(|w| w.to_ascii_lowercase()).collect();
    if words.len() < 5 || words[0] != "%%matrixmarket" || words[1] != "matrix" || words[2] != "coordinate" {
        return Err(parse_err(path, 1, "expected `%%MatrixMarket matrix coordinate <field> <symmetry>`"));
    }
    if words[3] != "real" && words[3] != "integer" {
        return Err(parse_err(path, 1, format!("unsupported field `{}`", words[3])));
    }
    let symmetric = match words[4].as_str() {
        "general" => false,
        "symmetric" => true,
        other => return Err(parse_err(path, 1, format!("unsupported symmetry `{other}`"))),
    };
    let mut lines = data_lines(&text);
    let (ln, size) = lines.next().ok_or_else(|| parse_err(path, 1, "missing size line"))?;
    let mut tok = size.split_whitespace();
    let rows: usize = parse_num(path, ln, tok.next(), "row count")?;
    let cols: usize = parse_num(path, ln, tok.next(), "column count")?;
    let nnz: usize = parse_num(path, ln, tok.next(), "entry count")?;
    let mut m = Mat::zeros(rows, cols);
    let mut count = 0;
    for (ln, l) in lines {
        let mut tok = l.split_whitespace();
        let i: usize = parse_num(path, ln, tok.next(), "row index")?;
        let j: usize = parse_num(path, ln, tok.next(), "column index")?;
        let v: f64 = parse_num(path, ln, tok.next(), "value")?;
        if i == 0 || i > rows || j == 0 || j > cols {
            return Err(parse_err(path, ln, format!("index ({i}, {j}) outside {rows}x{cols}")));
        }
        if !v.is_finite() {
            return Err(parse_err(path, ln, "non-finite value"));
        }
        m[(i - 1, j - 1)] += v;
        if symmetric && i != j {
            m[(j - 1, i - 1)] += v;
        }
        count += 1;
    }
    if count != nnz {
        return Err(parse_err(path, ln, format!("size line announces {nnz} entries, found {count}")));
    }
    Ok(m)
}

pub fn write_coo3(path: &Path, h: &SymQuadTensor) -> Result<()> {
    let mut out = format!("%%Coo3 {}\n", h.dim());
    for &(i, j, k, v) in h.entries() {
        writeln!(out, "{i} {j} {k} {v:?}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_coo3(path: &Path) -> Result<SymQuadTensor> {
    let text = fs::read_to_string(path)?;
    let header = text.lines().next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let mut words = header.split_whitespace();
    if words.next() != Some("%%Coo3") {
        return Err(parse_err(path, 1, "expected header `%%Coo3 n`"));
    }
    let n: usize = parse_num(path, 1, words.next(), "dimension")?;
    let mut raw = Vec::new();
    for (ln, l) in data_lines(&text) {
        let mut tok = l.split_whitespace();
        let i: usize = parse_num(path, ln, tok.next(), "index i")?;
        let j: usize = parse_num(path, ln, tok.next(), "index j")?;
        let k: usize = parse_num(path, ln, tok.next(), "index k")?;
        let v: f64 = parse_num(path, ln, tok.next(), "value")?;
        if i >= n || j >= n || k >= n {
            return Err(parse_err(path, ln, format!("index ({i}, {j}, {k}) out of range for n = {n}")));
        }
        if !v.is_finite() {
            return Err(parse_err(path, ln, "non-finite value"));
        }
        raw.push((i, j, k, v));
    }
    SymQuadTensor::symmetrize(&raw, n)
}

pub fn write_vec(path: &Path, v: &Vector) -> Result<()> {
    let mut out = String::new();
    for x in v.iter() {
        writeln!(out, "{x:?}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_vec(path: &Path) -> Result<Vector> {
    let text = fs::read_to_string(path)?;
    let mut vals = Vec::new();
    for (ln, l) in data_lines(&text) {
        let v: f64 = parse_num(path, ln, Some(l), "value")?;
        if !v.is_finite() {
            return Err(parse_err(path, ln, "non-finite value"));
        }
        vals.push(v);
    }
    Ok(Vector::from_vec(vals))
}

/// Writes every present component of `sys` into `dir` (created if needed).
pub fn save_system(sys: &QuadraticSystem, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_matrix_market(&dir.join("E.mtx"), &sys.e)?;
    write_matrix_market(&dir.join("A.mtx"), &sys.a)?;
    write_matrix_market(&dir.join("B.mtx"), &sys.b)?;
    write_matrix_market(&dir.join("C.mtx"), &sys.c)?;
    if let Some(g) = &sys.g {
        write_matrix_market(&dir.join("G.mtx"), g)?;
    }
    write_coo3(&dir.join("H.coo3"), &sys.h)?;
    for (name, v) in [("zbar.vec", &sys.zbar), ("fz.vec", &sys.f_z), ("fq.vec", &sys.f_q)] {
        if let Some(v) = v {
            write_vec(&dir.join(name), v)?;
        }
    }
    Ok(())
}

/// Loads and validates a system directory.
pub fn load_system(dir: &Path) -> Result<QuadraticSystem> {
    let opt = |name: &str| {
        let p = dir.join(name);
        p.exists().then_some(p)
    };
    let e = read_matrix_market(&dir.join("E.mtx"))?;
    let a = read_matrix_market(&dir.join("A.mtx"))?;
    let b = read_matrix_market(&dir.join("B.mtx"))?;
    let c = read_matrix_market(&dir.join("C.mtx"))?;
    let h = read_coo3(&dir.join("H.coo3"))?;
    let mut builder = QuadraticSystem::builder(e, a, h, b, c);
    if let Some(p) = opt("G.mtx") {
        builder = builder.constraint(read_matrix_market(&p)?);
    }
    if let Some(p) = opt("fz.vec") {
        let fq = opt("fq.vec").map(|p| read_vec(&p)).transpose()?;
        builder = builder.forcing(read_vec(&p)?, fq);
    }
    if let Some(p) = opt("zbar.vec") {
        builder = builder.steady_state(read_vec(&p)?);
    }
    builder.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_burgers, make_oseen_mac, BaseFlow};

    #[test]
    fn burgers_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut sys = make_burgers(16, 0.05, 2.0, &[[0.2, 0.4], [0.6, 0.8]]).unwrap();
        sys.f_z = Some(Vector::from_fn(16, |i, _| (i as f64 * 0.37).sin() / 3.0));
        save_system(&sys, dir.path()).unwrap();
        let back = load_system(dir.path()).unwrap();
        assert_eq!(sys, back);
    }

    #[test]
    fn oseen_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let sys =
            make_oseen_mac(4, 4, 0.1, 1.0, &BaseFlow::Streamfunction { amplitude: 0.7 }, [0.2, 0.8, 0.2, 0.8], 1).unwrap();
        save_system(&sys, dir.path()).unwrap();
        let back = load_system(dir.path()).unwrap();
        assert_eq!(sys, back);
    }

    #[test]
    fn coo3_single_entry_symmetrizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("H.coo3");
        fs::write(&p, "%%Coo3 3\n0 1 2 1.0\n").unwrap();
        let h = read_coo3(&p).unwrap();
        assert_eq!(h.entries(), &[(0, 1, 2, 0.5), (0, 2, 1, 0.5)]);
    }

    #[test]
    fn coo3_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("H.coo3");
        fs::write(&p, "%%Coo3 3\n0 1 2 1.0\n0 1 3 1.0\n").unwrap();
        match read_coo3(&p).unwrap_err() {
            Error::Parse { line, file, .. } => {
                assert_eq!(line, 3);
                assert!(file.ends_with("H.coo3"));
            }
            e => panic!("unexpected {e}"),
        }
        fs::write(&p, "%%Tensor 3\n").unwrap();
        assert!(matches!(read_coo3(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn malformed_matrix_market() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("A.mtx");
        fs::write(&p, "%%MatrixMarket matrix array real general\n2 2\n1\n2\n3\n4\n").unwrap();
        assert!(matches!(read_matrix_market(&p), Err(Error::Parse { line: 1, .. })));
        fs::write(&p, "%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n").unwrap();
        assert!(matches!(read_matrix_market(&p), Err(Error::Parse { line: 3, .. })));
        fs::write(&p, "%%MatrixMarket matrix coordinate real symmetric\n2 2 1\n2 1 4.0\n").unwrap();
        let m = read_matrix_market(&p).unwrap();
        assert_eq!(m, Mat::from_row_slice(2, 2, &[0.0, 4.0, 4.0, 0.0]));
    }

    #[test]
    fn duplicated_g_column_is_a_rank_error() {
        let dir = tempfile::tempdir().unwrap();
        let sys = make_oseen_mac(4, 4, 0.1, 0.0, &BaseFlow::Zero, [0.2, 0.8, 0.2, 0.8], 1).unwrap();
        save_system(&sys, dir.path()).unwrap();
        let mut g = sys.g.clone().unwrap();
        let c0 = g.column(0).into_owned();
        g.set_column(1, &c0);
        write_matrix_market(&dir.path().join("G.mtx"), &g).unwrap();
        match load_system(dir.path()).unwrap_err() {
            Error::Rank { name, .. } => assert_eq!(name, "G"),
            e => panic!("unexpected {e}"),
        }
    }
}
