//! XYZ molecules, whitespace point rows and ascii PLY clouds.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::{argmax_type, AtomTables, MarkedPointSet, Vec3};
use crate::error::{Error, Result};

/// All frames of an XYZ text. Types are one-hot over `tables`.
pub fn parse_xyz(text: &str, path: &Path, tables: &AtomTables) -> Result<Vec<MarkedPointSet>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut frames = Vec::new();
    let mut at = 0;
    while at < lines.len() {
        if lines[at].trim().is_empty() {
            at += 1;
            continue;
        }
        let n: usize = lines[at]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, at + 1, "expected an atom count"))?;
        if n == 0 {
            return Err(Error::parse(path, at + 1, "atom count must be positive"));
        }
        if at + 2 + n > lines.len() {
            return Err(Error::parse(path, lines.len(), format!("frame declares {n} atoms but the file ends early")));
        }
        let mut coords = Vec::with_capacity(n);
        let mut types = Vec::with_capacity(n);
        for (off, line) in lines[at + 2..at + 2 + n].iter().enumerate() {
            let lineno = at + 3 + off;
            let mut it = line.split_whitespace();
            let sym = it.next().ok_or_else(|| Error::parse(path, lineno, "empty atom line"))?;
            let mut xyz = [0.0; 3];
            for v in &mut xyz {
                let tok = it.next().ok_or_else(|| Error::parse(path, lineno, "expected SYMBOL x y z"))?;
                *v = tok
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad coordinate {tok:?}")))?;
            }
            types.push(tables.index_of(sym).map_err(|e| Error::parse(path, lineno, e.to_string()))?);
            coords.push(xyz);
        }
        frames.push(MarkedPointSet::one_hot(coords, &types, tables.len())?);
        at += 2 + n;
    }
    if frames.is_empty() {
        return Err(Error::parse(path, 1, "no frames"));
    }
    Ok(frames)
}

pub fn read_xyz_frames(path: &Path, tables: &AtomTables) -> Result<Vec<MarkedPointSet>> {
    parse_xyz(&std::fs::read_to_string(path)?, path, tables)
}

/// First frame of an XYZ file.
pub fn read_xyz(path: &Path, tables: &AtomTables) -> Result<MarkedPointSet> {
    Ok(read_xyz_frames(path, tables)?.swap_remove(0))
}

/// One XYZ frame; types are written as the symbol of their rounded index,
/// untyped points as `X`.
pub fn write_xyz_frame<W: Write>(w: &mut W, set: &MarkedPointSet, symbols: &[String], comment: &str) -> Result<()> {
    writeln!(w, "{}", set.len())?;
    writeln!(w, "{}", comment.replace('\n', " "))?;
    for i in 0..set.len() {
        let sym = if set.k == 0 {
            "X"
        } else {
            let t = argmax_type(set.type_row(i))?;
            symbols
                .get(t)
                .map(String::as_str)
                .ok_or_else(|| Error::Table(format!("no symbol for type index {t}")))?
        };
        let p = set.coords[i];
        writeln!(w, "{sym} {:.10} {:.10} {:.10}", p[0], p[1], p[2])?;
    }
    Ok(())
}

pub fn write_xyz(path: &Path, set: &MarkedPointSet, symbols: &[String], comment: &str) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_xyz_frame(&mut f, set, symbols, comment)?;
    f.flush()?;
    Ok(())
}

/// Whitespace-separated `x y z` rows; blank lines and `#` comments skipped.
pub fn parse_cloud_rows(text: &str, path: &Path) -> Result<MarkedPointSet> {
    let mut coords = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        coords.push(parse_point(line.split_whitespace(), path, i + 1)?);
    }
    if coords.is_empty() {
        return Err(Error::parse(path, 1, "no points"));
    }
    MarkedPointSet::untyped(coords)
}

fn parse_point<'a>(mut it: impl Iterator<Item = &'a str>, path: &Path, line: usize) -> Result<Vec3> {
    let mut p = [0.0f64; 3];
    for v in &mut p {
        let tok = it.next().ok_or_else(|| Error::parse(path, line, "expected three coordinates"))?;
        *v = tok
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad coordinate {tok:?}")))?;
        if !v.is_finite() {
            return Err(Error::parse(path, line, "non-finite coordinate"));
        }
    }
    Ok(p)
}

pub fn write_cloud_rows(path: &Path, set: &MarkedPointSet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in &set.coords {
        writeln!(f, "{:.10} {:.10} {:.10}", p[0], p[1], p[2])?;
    }
    f.flush()?;
    Ok(())
}

/// Vertices of an ascii PLY file; properties other than x, y, z are ignored.
pub fn parse_ply(text: &str, path: &Path) -> Result<MarkedPointSet> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(path, 1, "missing ply magic")),
    }
    // element name, count, property names
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut header_end = None;
    for (i, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(Error::parse(path, i + 1, format!("only ascii PLY is supported, got {fmt}")));
                }
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let n = count
                    .parse()
                    .map_err(|_| Error::parse(path, i + 1, "bad element count"))?;
                elements.push((name.to_string(), n, Vec::new()));
            }
            ["property", "list", ..] => {
                let name = toks.last().unwrap().to_string();
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, i + 1, "property before element"))?;
                el.2.push(name);
            }
            ["property", _ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, i + 1, "property before element"))?;
                el.2.push(name.to_string());
            }
            ["end_header"] => {
                header_end = Some(i);
                break;
            }
            _ => return Err(Error::parse(path, i + 1, format!("unrecognised header line {line:?}"))),
        }
    }
    if header_end.is_none() {
        return Err(Error::parse(path, 1, "missing end_header"));
    }
    let mut coords = Vec::new();
    for (name, count, props) in &elements {
        if name != "vertex" {
            // skip the rows of elements that precede or follow the vertices
            if coords.is_empty() {
                for _ in 0..*count {
                    lines.next();
                }
            }
            continue;
        }
        let col = |p: &str| {
            props
                .iter()
                .position(|q| q == p)
                .ok_or_else(|| Error::parse(path, 1, format!("vertex element lacks property {p}")))
        };
        let idx = [col("x")?, col("y")?, col("z")?];
        for _ in 0..*count {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, text.lines().count(), "fewer vertex rows than declared"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let pick = idx.iter().map(|&c| toks.get(c).copied().unwrap_or(""));
            coords.push(parse_point(pick, path, i + 1)?);
        }
        break;
    }
    if coords.is_empty() {
        return Err(Error::parse(path, 1, "no vertices"));
    }
    MarkedPointSet::untyped(coords)
}

pub fn read_ply(path: &Path) -> Result<MarkedPointSet> {
    parse_ply(&std::fs::read_to_string(path)?, path)
}

/// Reads one point set, dispatching on extension: `.xyz` molecules (first
/// frame, needs `tables`), `.ply`, otherwise coordinate rows.
pub fn read_point_set(path: &Path, tables: Option<&AtomTables>) -> Result<MarkedPointSet> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("xyz") => {
            let t = tables.ok_or_else(|| Error::Config("reading XYZ molecules needs atom tables".into()))?;
            read_xyz(path, t)
        }
        Some("ply") => read_ply(path),
        _ => parse_cloud_rows(&std::fs::read_to_string(path)?, path),
    }
}

pub const DATA_EXTENSIONS: &[&str] = &["xyz", "ply", "txt", "pts"];

/// Data files in a directory (or the single given file), sorted by name.
pub fn list_data_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(path)? {
        let p = entry?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && ext.is_some_and(|e| DATA_EXTENSIONS.contains(&e.as_str())) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no data files under {}", path.display())));
    }
    Ok(files)
}

/// Every point set under `path`. Multi-frame XYZ files contribute all frames.
pub fn load_dataset(path: &Path, tables: Option<&AtomTables>) -> Result<Vec<MarkedPointSet>> {
    let mut out = Vec::new();
    for f in list_data_files(path)? {
        if f.extension().is_some_and(|e| e.eq_ignore_ascii_case("xyz")) {
            let t = tables.ok_or_else(|| Error::Config("reading XYZ molecules needs atom tables".into()))?;
            out.extend(read_xyz_frames(&f, t)?);
        } else {
            out.push(read_point_set(&f, tables)?);
        }
    }
    Ok(out)
}

/// Symbols occurring in the XYZ files under `path`, in `tables` order.
/// Empty when there are no XYZ files.
pub fn scan_symbols(path: &Path, tables: &AtomTables) -> Result<Vec<String>> {
    let mut seen = vec![false; tables.len()];
    for f in list_data_files(path)? {
        if !f.extension().is_some_and(|e| e.eq_ignore_ascii_case("xyz")) {
            continue;
        }
        for set in read_xyz_frames(&f, tables)? {
            for i in set.type_indices()? {
                seen[i] = true;
            }
        }
    }
    Ok(tables
        .symbols()
        .into_iter()
        .zip(seen)
        .filter_map(|(s, on)| on.then_some(s))
        .collect())
}
